"""Encoder-decoder transformer whose attention sites are gated by selection layers.

Every attention site (encoder self, cross, decoder self) belongs to a
selection group of ``r`` consecutive layers. The group's lowest layer
computes the low-dimensional selection attention and a top-k mask; the
other layers of the group reuse that mask. With ``selective=False`` the
model is a plain dense transformer with the same parameter layout minus
the selection weights.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

from . import attention as att
from .attention import AttentionRecord, SelectionLayer
from .cost import CostInputs
from .data import BOS, EOS, PAD, Batch, stream
from .errors import ConfigError, DivergenceError, InputError
from .objective import LossBreakdown, combined_loss, kl_attention_loss, nmt_loss
from .optim import Adam, OptimConfig
from .sparsity import SelectionConfig, SparsityState, captured_mass, group_leader, update_k
from .tensor import (
    SENTINEL,
    Tensor,
    backward,
    dropout,
    embedding,
    layer_norm,
    linear,
    matmul,
    relu,
    softmax_rows,
    swap_last,
    uncounted,
)

STACK_KINDS = {"encoder-self": "enc", "decoder-self": "dec", "cross": "dec"}
ABLATIONS = ("fixed-window", "no-supervision", "no-reparam")


@dataclass
class ModelConfig:
    n_layers: int = 2
    d: int = 64
    heads: int = 4
    ffn_dim: int = 128
    vocab_size: int = 64
    max_len: int = 256
    dropout: float = 0.1
    selection: SelectionConfig = field(default_factory=SelectionConfig)
    seed: int = 0
    selective: bool = True

    def validate(self) -> None:
        if self.d % self.heads:
            raise ConfigError(f"model.d={self.d} is not divisible by model.heads={self.heads}")
        if min(self.n_layers, self.d, self.heads, self.ffn_dim, self.vocab_size, self.max_len) < 1:
            raise ConfigError("model sizes must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("model.dropout must lie in [0, 1)")
        self.selection.validate(self.n_layers)
        if self.selection.d_s > self.d:
            raise ConfigError(f"selection.d_s={self.selection.d_s} exceeds model.d={self.d}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, obj: dict) -> ModelConfig:
        obj = dict(obj)
        obj["selection"] = SelectionConfig(**obj.get("selection", {}))
        return cls(**obj)


def ablate(config: ModelConfig, variant: str) -> ModelConfig:
    """Copy of ``config`` with one mechanism removed."""
    sel = config.selection
    if variant == "fixed-window":
        sel = dataclasses.replace(sel, selector="fixed-window")
    elif variant == "no-supervision":
        sel = dataclasses.replace(sel, alpha=0.0)
    elif variant == "no-reparam":
        sel = dataclasses.replace(sel, straight_through=False)
    else:
        raise ConfigError(f"unknown ablation {variant!r}; choose one of {ABLATIONS}")
    return dataclasses.replace(config, selection=sel)


# ----------------------------------------------------------------------------
# parameters


def _attn_shapes(prefix: str, d: int) -> list[tuple[str, tuple[int, ...]]]:
    out = []
    # no key bias: it shifts every logit of a row equally and has zero gradient
    for w in ("q", "k", "v", "o"):
        out.append((f"{prefix}.w{w}", (d, d)))
        if w != "k":
            out.append((f"{prefix}.b{w}", (d,)))
    return out


def _ln(prefix: str, d: int) -> list[tuple[str, tuple[int, ...]]]:
    return [(f"{prefix}.g", (d,)), (f"{prefix}.b", (d,))]


def _ffn(prefix: str, d: int, f: int) -> list[tuple[str, tuple[int, ...]]]:
    return [(f"{prefix}.w1", (d, f)), (f"{prefix}.b1", (f,)), (f"{prefix}.w2", (f, d)), (f"{prefix}.b2", (d,))]


def dense_manifest(c: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    d, f, v = c.d, c.ffn_dim, c.vocab_size
    m = [("src_embed", (v, d)), ("tgt_embed", (v, d))]
    for i in range(c.n_layers):
        m += _ln(f"enc.{i}.ln1", d) + _attn_shapes(f"enc.{i}.self", d) + _ln(f"enc.{i}.ln2", d) + _ffn(f"enc.{i}.ffn", d, f)
    m += _ln("enc.ln", d)
    for i in range(c.n_layers):
        m += _ln(f"dec.{i}.ln1", d) + _attn_shapes(f"dec.{i}.self", d)
        m += _ln(f"dec.{i}.ln2", d) + _attn_shapes(f"dec.{i}.cross", d)
        m += _ln(f"dec.{i}.ln3", d) + _ffn(f"dec.{i}.ffn", d, f)
    m += _ln("dec.ln", d) + [("out.w", (d, v)), ("out.b", (v,))]
    return m


def leaders(c: ModelConfig) -> list[int]:
    return list(range(0, c.n_layers, c.selection.r))


def selection_manifest(c: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    if not c.selective or c.selection.selector != "topk":
        return []
    m = []
    for kind in att.KINDS:
        for lead in leaders(c):
            m += [(f"sel.{kind}.{lead}.wq", (c.d, c.selection.d_s)), (f"sel.{kind}.{lead}.wk", (c.d, c.selection.d_s))]
    return m


def parameter_manifest(c: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    return dense_manifest(c) + selection_manifest(c)


def _init_value(name: str, shape: tuple[int, ...], rng: np.random.Generator) -> np.ndarray:
    leaf = name.rsplit(".", 1)[-1]
    if name.endswith("embed"):
        return rng.normal(0.0, shape[1] ** -0.5, shape)
    if leaf == "g":
        return np.ones(shape)
    if leaf.startswith("b") and len(shape) == 1:
        return np.zeros(shape)
    return rng.normal(0.0, shape[0] ** -0.5, shape)


def init_parameters(c: ModelConfig) -> dict[str, Tensor]:
    params: dict[str, Tensor] = {}
    dense_rng = stream(c.seed, "params")
    for name, shape in dense_manifest(c):
        params[name] = Tensor(_init_value(name, shape, dense_rng), requires_grad=True, name=name)
    # separate stream: dense weights do not depend on whether selection exists
    sel_rng = stream(c.seed, "select")
    for name, shape in selection_manifest(c):
        params[name] = Tensor(_init_value(name, shape, sel_rng), requires_grad=True, name=name)
    return params


def sinusoid_table(n: int, d: int) -> np.ndarray:
    pos = np.arange(n)[:, None]
    i = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


# ----------------------------------------------------------------------------
# forward bookkeeping


@dataclass
class Site:
    """What one attention site produced during a forward pass."""

    kind: str
    layer: int
    leader: int
    mask: np.ndarray | None  # [B, Nq, Nk]; None for dense
    structural: np.ndarray  # [B, Nq, Nk]
    q_valid: np.ndarray  # [B, Nq]
    full: np.ndarray | None  # [B, H, Nq, Nk] full attention, when computed
    selection: Tensor | None  # [B, Nq, Nk] selection attention at leaders
    full_tensor: Tensor | None = None  # differentiable full attention (symmetric KL only)


@dataclass
class ForwardResult:
    logits: Tensor
    sites: list[Site]
    supervision: Tensor | None
    src_valid: np.ndarray
    tgt_valid: np.ndarray

    def freeze(self) -> dict:
        """This pass's selection regime as :class:`FrozenSelection` values per group."""
        out = {}
        for s in self.sites:
            if s.selection is not None:
                teacher = None if s.full is None else s.full.mean(axis=1)
                out[(s.kind, s.leader)] = FrozenSelection(s.mask, s.selection.data.copy(), teacher)
        return out

    def group_masses(self) -> dict[tuple[str, int], float]:
        """Captured mass per (kind, leader), measured on the leader's own attention.

        The leader's attention is the supervision target, so it is the one
        the controller guards; followers reuse the mask as is.
        """
        return {
            (s.kind, s.leader): captured_mass(s.full, s.mask, s.q_valid[:, None, :])
            for s in self.sites
            if s.mask is not None and s.full is not None and s.layer == s.leader
        }

    def records(self, example: int | None = None, leaders_only: bool = True) -> list[AttentionRecord]:
        """Attention records trimmed to real lengths, one per example and site.

        Full attention is averaged over heads.
        """
        out = []
        batch = range(self.src_valid.shape[0]) if example is None else [example]
        for s in self.sites:
            if leaders_only and s.layer != s.leader:
                continue
            for b in batch:
                nq = int(s.q_valid[b].sum())
                nk = int(s.structural[b, 0].sum()) if s.kind != "decoder-self" else nq
                full = None if s.full is None else s.full[b].mean(axis=0)[:nq, :nk]
                sel = None if s.selection is None else s.selection.data[b, :nq, :nk]
                mask = s.structural[b, :nq, :nk] if s.mask is None else s.mask[b, :nq, :nk]
                out.append(AttentionRecord(s.kind, s.layer, full, sel, mask.copy()))
        return out


@dataclass
class FrozenSelection:
    """Values a group leader reuses instead of computing them, for gradient checks.

    ``mask`` replaces top-k selection, ``anchor`` freezes the
    straight-through stop-gradient copy and ``teacher`` freezes the
    (detached) head-pooled supervision target.
    """

    mask: np.ndarray
    anchor: np.ndarray | None = None
    teacher: np.ndarray | None = None


@dataclass
class PassContext:
    frozen: dict = field(default_factory=dict)
    capture: bool = False


def _heads(x: Tensor, h: int) -> Tensor:
    b, n, d = x.shape
    return x.reshape(b, n, h, d // h).transpose(0, 2, 1, 3)


def _merge(x: Tensor) -> Tensor:
    b, h, n, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, n, h * dh)


# ----------------------------------------------------------------------------
# model


class Seq2Seq:
    def __init__(self, config: ModelConfig, params: dict[str, Tensor] | None = None):
        config.validate()
        self.config = config
        self.params = init_parameters(config) if params is None else params
        missing = [n for n, _ in parameter_manifest(config) if n not in self.params]
        if missing:
            raise ConfigError(f"parameters missing from checkpoint: {missing[:5]}")
        self.pe = sinusoid_table(config.max_len + 2, config.d)
        sel = config.selection
        self.states: dict[tuple[str, int], SparsityState] = {}
        if config.selective:
            for kind in att.KINDS:
                for lead in leaders(config):
                    self.states[(kind, lead)] = SparsityState(k=sel.k_init, kind=kind, layer_index=lead)
        self.step = 0

    # -- helpers ------------------------------------------------------------

    def p(self, name: str) -> Tensor:
        return self.params[name]

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def _check_ids(self, ids: np.ndarray, what: str) -> None:
        if ids.size and (ids.min() < 0 or ids.max() >= self.config.vocab_size):
            raise InputError(f"{what} token id outside [0, {self.config.vocab_size})")
        if ids.shape[-1] > self.config.max_len:
            raise InputError(f"{what} length {ids.shape[-1]} exceeds max_len {self.config.max_len}")

    def _embed(self, table: str, ids: np.ndarray, offset: int, rng) -> Tensor:
        c = self.config
        x = embedding(self.p(table), ids) * math.sqrt(c.d) + self.pe[offset : offset + ids.shape[1]]
        return dropout(x, c.dropout, rng)

    def _ln(self, prefix: str, x: Tensor) -> Tensor:
        return layer_norm(x, self.p(prefix + ".g"), self.p(prefix + ".b"))

    def _ffn(self, prefix: str, x: Tensor, rng) -> Tensor:
        h = relu(linear(x, self.p(prefix + ".w1"), self.p(prefix + ".b1"), "ffn"))
        return dropout(linear(h, self.p(prefix + ".w2"), self.p(prefix + ".b2"), "ffn"), self.config.dropout, rng)

    def selection_layer(self, kind: str, leader: int) -> SelectionLayer:
        return SelectionLayer(self.p(f"sel.{kind}.{leader}.wq"), self.p(f"sel.{kind}.{leader}.wk"))

    def _select(self, kind, leader, xq, xkv, structural, q_len, k_len, mode, ctx):
        """Selection attention, mask and straight-through surrogate for a group leader."""
        sel = self.config.selection
        if sel.selector == "fixed-window":
            mask = structural.copy()
            for b in range(mask.shape[0]):
                nq, nk = int(q_len[b]), int(k_len[b])
                mask[b, :nq, :nk] = att.fixed_window_mask(nq, nk, sel.window_length, kind) & structural[b, :nq, :nk]
            return None, mask, None
        A_s = att.selection_scores(xq, xkv, self.selection_layer(kind, leader), structural)
        anchor = None
        if (kind, leader) in ctx.frozen:
            mask, anchor = ctx.frozen[(kind, leader)].mask, ctx.frozen[(kind, leader)].anchor
        else:
            mask = att.topk_mask(A_s, self.states[(kind, leader)].k, sel.min_tokens, structural)
        soft = att.straight_through(mask, A_s, anchor) if mode == "train" and sel.straight_through else None
        return A_s, mask, soft

    def _attend(self, prefix, kind, layer, xq, xkv, structural, q_valid, lengths, mode, groups, rng, ctx):
        c = self.config
        q = _heads(linear(xq, self.p(prefix + ".wq"), self.p(prefix + ".bq"), "attn.proj"), c.heads)
        k = _heads(linear(xkv, self.p(prefix + ".wk"), None, "attn.proj"), c.heads)
        v = _heads(linear(xkv, self.p(prefix + ".wv"), self.p(prefix + ".bv"), "attn.proj"), c.heads)
        site = Site(kind, layer, layer, None, structural, q_valid, None, None)

        if not c.selective:
            if mode == "train":
                out, w = att.full_attention(q, k, v, structural)
                site.full = w.data
            else:
                out, _ = att.selective_attention(q, k, v, structural, "infer")
        else:
            lead = group_leader(layer, c.selection.r)
            site.leader = lead
            if layer == lead:
                groups[kind] = self._select(kind, lead, xq, xkv, structural, *lengths, mode, ctx)
            A_s, mask, soft = groups[kind]
            site.mask = mask
            site.selection = A_s if layer == lead else None
            if mode == "train":
                logits = matmul(q, swap_last(k), "attn.logits") * (1.0 / math.sqrt(q.shape[-1]))
                if c.selection.symmetric_kl and A_s is not None and layer == lead:
                    full_t = softmax_rows(logits, att.additive(structural[:, None]))
                    site.full = full_t.data
                    site.full_tensor = full_t
                else:
                    site.full = softmax_rows(Tensor(logits.data), att.additive(structural[:, None])).data
                out, _ = att.selective_attention(q, k, v, mask, "train", soft_mask=soft, logits=logits)
            else:
                out, _ = att.selective_attention(q, k, v, mask, "infer")
                if ctx.capture:
                    with uncounted():
                        logits = np.matmul(q.data, np.swapaxes(k.data, -1, -2)) / math.sqrt(q.shape[-1])
                        site.full = softmax_rows(Tensor(logits), att.additive(structural[:, None])).data
        out = linear(_merge(out), self.p(prefix + ".wo"), self.p(prefix + ".bo"), "attn.proj")
        return dropout(out, c.dropout, rng), site

    # -- forward ------------------------------------------------------------

    def encode(self, src: np.ndarray, mode: str, rng, sites: list, ctx: PassContext | None = None):
        c = self.config
        ctx = ctx or PassContext()
        src_valid = src != PAD
        src_len = src_valid.sum(axis=1)
        structural = att.structural_mask(src_valid, src_valid, causal=False)
        x = self._embed("src_embed", src, 0, rng)
        groups: dict = {}
        for i in range(c.n_layers):
            h = self._ln(f"enc.{i}.ln1", x)
            a, site = self._attend(f"enc.{i}.self", "encoder-self", i, h, h, structural, src_valid,
                                   (src_len, src_len), mode, groups, rng, ctx)
            sites.append(site)
            x = x + a
            x = x + self._ffn(f"enc.{i}.ffn", self._ln(f"enc.{i}.ln2", x), rng)
        return self._ln("enc.ln", x)

    def forward(
        self,
        src: np.ndarray,
        tgt_in: np.ndarray,
        mode: str = "train",
        dropout_rng: np.random.Generator | None = None,
        frozen: dict | None = None,
        capture: bool = False,
    ) -> ForwardResult:
        """Teacher-forced pass producing logits ``[B, T, V]``.

        ``train`` computes full attention at every site (for supervision and
        the controller) and gates it with the masks; ``infer`` runs only the
        gathered sparse kernel. ``frozen`` maps (kind, leader) to a
        :class:`FrozenSelection`, holding the selection regime fixed for
        gradient checks. ``capture`` also
        records full attention in infer mode, outside the op counters.
        """
        if mode not in ("train", "infer"):
            raise ValueError(f"unknown mode {mode!r}")
        c = self.config
        src = np.asarray(src, dtype=np.int64)
        tgt_in = np.asarray(tgt_in, dtype=np.int64)
        self._check_ids(src, "source")
        self._check_ids(tgt_in, "target")
        ctx = PassContext(frozen or {}, capture)
        sites: list[Site] = []
        memory = self.encode(src, mode, dropout_rng, sites, ctx)

        src_valid = src != PAD
        tgt_valid = tgt_in != PAD
        src_len, tgt_len = src_valid.sum(axis=1), tgt_valid.sum(axis=1)
        self_struct = att.structural_mask(tgt_valid, tgt_valid, causal=True)
        cross_struct = att.structural_mask(tgt_valid, src_valid, causal=False)
        y = self._embed("tgt_embed", tgt_in, 0, dropout_rng)
        groups: dict = {}
        for i in range(c.n_layers):
            h = self._ln(f"dec.{i}.ln1", y)
            a, site = self._attend(f"dec.{i}.self", "decoder-self", i, h, h, self_struct, tgt_valid,
                                   (tgt_len, tgt_len), mode, groups, dropout_rng, ctx)
            sites.append(site)
            y = y + a
            h = self._ln(f"dec.{i}.ln2", y)
            a, site = self._attend(f"dec.{i}.cross", "cross", i, h, memory, cross_struct, tgt_valid,
                                   (tgt_len, src_len), mode, groups, dropout_rng, ctx)
            sites.append(site)
            y = y + a
            y = y + self._ffn(f"dec.{i}.ffn", self._ln(f"dec.{i}.ln3", y), dropout_rng)
        y = self._ln("dec.ln", y)
        logits = linear(y, self.p("out.w"), self.p("out.b"), "out.proj")

        supervision = None
        if mode == "train" and c.selective:
            terms = []
            for s in sites:
                if s.selection is None:
                    continue
                fixed = ctx.frozen.get((s.kind, s.leader))
                if fixed is not None and fixed.teacher is not None:
                    target = fixed.teacher
                elif s.full_tensor is not None:
                    target = s.full_tensor.mean(axis=1)
                else:
                    target = s.full.mean(axis=1)
                terms.append(kl_attention_loss(s.selection, target, s.q_valid, symmetric=c.selection.symmetric_kl))
            if terms:
                supervision = terms[0]
                for t in terms[1:]:
                    supervision = supervision + t
                supervision = supervision * (1.0 / len(terms))
        return ForwardResult(logits, sites, supervision, src_valid, tgt_valid)

    # -- training -----------------------------------------------------------

    def loss(self, batch: Batch, result: ForwardResult) -> LossBreakdown:
        nmt = nmt_loss(result.logits, batch.tgt_out, PAD)
        sup = result.supervision if result.supervision is not None else 0.0
        alpha = self.config.selection.alpha if self.config.selective else 0.0
        return combined_loss(nmt, sup, alpha)

    def train_step(self, batch: Batch, optimizer: Adam, k_override: dict | None = None) -> tuple[LossBreakdown, dict]:
        """One update on the combined loss, then one controller step per group.

        ``k_override`` (kind, leader) -> k replaces the controller, used to
        replay another run's sparsity trajectory. Returns the loss breakdown
        and the captured mass per group.
        """
        if k_override is not None:
            for key, k in k_override.items():
                self.states[key] = dataclasses.replace(self.states[key], k=k)
        self.zero_grad()
        rng = stream(self.config.seed, f"dropout/{self.step}")
        result = self.forward(batch.src, batch.tgt_in, "train", dropout_rng=rng)
        lb = self.loss(batch, result)
        if not math.isfinite(lb.total):
            raise DivergenceError(self.step, lb.total)
        backward(lb.graph)
        optimizer.step(self.params)
        masses = result.group_masses()
        if k_override is None:
            for key, m in masses.items():
                self.states[key] = update_k(self.states[key], min(max(m, 0.0), 1.0), self.config.selection)
        self.step += 1
        return lb, masses

    def make_optimizer(self, config: OptimConfig) -> Adam:
        return Adam(self.params, config)

    # -- decoding -----------------------------------------------------------

    def greedy_decode(self, src: np.ndarray, max_steps: int, mode: str = "infer") -> list[list[int]]:
        """Argmax decoding; returns generated bodies (without BOS/EOS).

        ``infer`` decodes incrementally with cached keys and the sparse
        kernel; ``train`` recomputes the full masked pass on every prefix.
        """
        src = np.asarray(src, dtype=np.int64)
        if mode == "train":
            return self._decode_full(src, max_steps)
        return self._decode_incremental(src, max_steps)

    @staticmethod
    def _finish(tokens: np.ndarray, max_steps: int) -> list[list[int]]:
        out = []
        for row in tokens:
            body = []
            for t in row[1 : max_steps + 1]:
                if t == EOS:
                    break
                body.append(int(t))
            out.append(body)
        return out

    def _decode_full(self, src, max_steps):
        b = src.shape[0]
        tokens = np.full((b, 1), BOS, dtype=np.int64)
        done = np.zeros(b, dtype=bool)
        for _ in range(max_steps + 1):
            logits = self.forward(src, tokens, "train").logits.data
            nxt = np.where(done, PAD, logits[:, -1].argmax(axis=-1))
            tokens = np.concatenate([tokens, nxt[:, None]], axis=1)
            done |= nxt == EOS
            if done.all():
                break
        return self._finish(np.where(tokens == PAD, EOS, tokens), max_steps)

    def _decode_incremental(self, src, max_steps):
        c = self.config
        sel = c.selection
        sites: list[Site] = []
        memory = self.encode(src, "infer", None, sites)
        src_valid = src != PAD
        src_len = src_valid.sum(axis=1)
        b = src.shape[0]
        h_count = c.heads

        def proj(x, prefix, w):
            bias = None if w == "k" else self.p(f"{prefix}.b{w}")
            return _heads(linear(x, self.p(f"{prefix}.w{w}"), bias, "attn.proj"), h_count)

        cross_kv = [(proj(memory, f"dec.{i}.cross", "k").data, proj(memory, f"dec.{i}.cross", "v").data) for i in range(c.n_layers)]
        cross_sel_keys = {}
        if c.selective and sel.selector == "topk":
            for lead in leaders(c):
                cross_sel_keys[lead] = matmul(memory, self.p(f"sel.cross.{lead}.wk"), "select.proj").data
        self_k = [np.zeros((b, h_count, 0, c.d // h_count)) for _ in range(c.n_layers)]
        self_v = [np.zeros((b, h_count, 0, c.d // h_count)) for _ in range(c.n_layers)]
        self_sel_keys = {lead: np.zeros((b, 0, sel.d_s)) for lead in leaders(c)}

        tokens = np.full((b, 1), BOS, dtype=np.int64)
        done = np.zeros(b, dtype=bool)
        for t in range(max_steps + 1):
            if t >= c.max_len:
                break
            y = self._embed("tgt_embed", tokens[:, -1:], t, None)
            masks: dict = {}
            for i in range(c.n_layers):
                h = self._ln(f"dec.{i}.ln1", y)
                q = proj(h, f"dec.{i}.self", "q")
                self_k[i] = np.concatenate([self_k[i], proj(h, f"dec.{i}.self", "k").data], axis=2)
                self_v[i] = np.concatenate([self_v[i], proj(h, f"dec.{i}.self", "v").data], axis=2)
                mask = self._step_mask("decoder-self", i, h, self_sel_keys, None, t + 1, masks)
                a, _ = att.selective_attention(q, self_k[i], self_v[i], mask, "infer")
                y = y + linear(_merge(a), self.p(f"dec.{i}.self.wo"), self.p(f"dec.{i}.self.bo"), "attn.proj")

                h = self._ln(f"dec.{i}.ln2", y)
                q = proj(h, f"dec.{i}.cross", "q")
                mask = self._step_mask("cross", i, h, cross_sel_keys, src_valid, src_len, masks, t=t)
                a, _ = att.selective_attention(q, cross_kv[i][0], cross_kv[i][1], mask, "infer")
                y = y + linear(_merge(a), self.p(f"dec.{i}.cross.wo"), self.p(f"dec.{i}.cross.bo"), "attn.proj")
                y = y + self._ffn(f"dec.{i}.ffn", self._ln(f"dec.{i}.ln3", y), None)
            logits = linear(self._ln("dec.ln", y), self.p("out.w"), self.p("out.b"), "out.proj").data[:, -1]
            nxt = np.where(done, PAD, logits.argmax(axis=-1))
            tokens = np.concatenate([tokens, nxt[:, None]], axis=1)
            done |= nxt == EOS
            if done.all():
                break
        return self._finish(np.where(tokens == PAD, EOS, tokens), max_steps)

    def _step_mask(self, kind, layer, h, sel_keys, key_valid, n_keys, masks, t=None):
        """Mask row ``[B, 1, Nk]`` for the newest query during incremental decoding."""
        c = self.config
        sel = c.selection
        b = h.shape[0]
        if kind == "decoder-self":
            structural = np.ones((b, 1, n_keys), dtype=bool)
        else:
            structural = key_valid[:, None, :]
        if not c.selective:
            return structural
        lead = group_leader(layer, sel.r)
        if layer != lead:
            return masks[kind]
        if sel.selector == "fixed-window":
            mask = np.zeros_like(structural)
            for i in range(b):
                if kind == "decoder-self":
                    row = att.fixed_window_mask(n_keys, n_keys, sel.window_length, kind)[-1]
                    mask[i, 0, :] = row
                else:
                    # proportional centre depends on the final target length, unknown while decoding;
                    # the step index stands in for the query position over a source-length target
                    nk = int(n_keys[i])
                    full = att.fixed_window_mask(max(nk, t + 1), nk, sel.window_length, kind)
                    mask[i, 0, :nk] = full[min(t, full.shape[0] - 1)]
            masks[kind] = mask & structural
            return masks[kind]
        layer_w = self.selection_layer(kind, lead)
        q_s = matmul(h, layer_w.w_q, "select.proj").data
        if kind == "decoder-self":
            k_new = matmul(h, layer_w.w_k, "select.proj").data
            sel_keys[lead] = np.concatenate([sel_keys[lead], k_new], axis=1)
        keys = sel_keys[lead]
        logits = matmul(Tensor(q_s), swap_last(Tensor(keys)), "select.logits").data / math.sqrt(sel.d_s)
        A_s = softmax_rows(Tensor(logits), att.additive(structural)).data
        mask = att.topk_mask(A_s, self.states[(kind, lead)].k, sel.min_tokens, structural)
        masks[kind] = mask
        return mask

    # -- cost accounting ----------------------------------------------------

    def cost_sites(self, result: ForwardResult, nominal: bool = False) -> list[CostInputs]:
        """Analytic cost inputs, one per example, attention kind and sharing group.

        By default ``k`` is the realized keep fraction over the padded
        shapes, which the counted work must match exactly. With
        ``nominal=True`` each group uses its controller k and the real
        sequence lengths, the form the closed-form cost assumes.
        """
        c = self.config
        out = []
        groups: dict[tuple[str, int], list[Site]] = {}
        for s in result.sites:
            groups.setdefault((s.kind, s.leader), []).append(s)
        for (kind, lead), sites in groups.items():
            n = len(sites)
            for b in range(result.src_valid.shape[0]):
                mask = sites[0].mask[b] if sites[0].mask is not None else sites[0].structural[b]
                if nominal:
                    nq = int(sites[0].q_valid[b].sum())
                    nk = int(sites[0].structural[b].any(axis=0).sum())
                    k = self.states[(kind, lead)].k if c.selective else 1.0
                else:
                    nq, nk = mask.shape
                    k = float(mask.sum()) / (nq * nk)
                out.append(CostInputs(n=n, N=nq, N_kv=nk, d=c.d, d_s=c.selection.d_s, k=k, r=n))
        return out
