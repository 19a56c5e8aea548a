"""The full captioner: patch embedding, BDAM stack, HASD and the decoder."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .bdam import Bdam, BiTemporalFeatures
from .decoder import CaptionBatch, DecoderParams, caption_loss, decoder_forward, generate_greedy
from .hasd import Hasd, MoEConfig, RoutingDecision, hasd_forward, routing_loss
from .nn import Linear, Module
from .tensor import Tensor


@dataclass
class ModelConfig:
    d_in: int = 64
    d_model: int = 64
    grid: tuple[int, int] = (7, 7)
    bdam_layers: int = 3
    bdam_hidden: int = 64
    decoder_layers: int = 1
    decoder_ffn: int = 128
    unchanged_ffn: int = 128
    max_len: int = 24
    vocab_size: int = 4
    tied_bdam: bool = False
    moe: MoEConfig = field(default_factory=MoEConfig)

    def __post_init__(self):
        self.grid = tuple(int(v) for v in self.grid)
        if isinstance(self.moe, dict):
            self.moe = MoEConfig(**self.moe)
        if self.bdam_layers < 1 or self.decoder_layers < 1:
            raise ValueError("BDAM and decoder depths must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["grid"] = list(self.grid)
        return d


class PatchEmbed(Module):
    """Shared projection of both streams plus a learned per-position embedding."""

    def __init__(self, d_in: int, d: int, n_tokens: int, rng: np.random.Generator):
        self.proj = Linear(d_in, d, rng)
        self.pos = T.param(rng.normal(0.0, 0.1, size=(n_tokens, d)))

    def forward(self, x: Tensor) -> Tensor:
        y = self.proj(x)
        return y + self.pos.expand(y.shape)


@dataclass
class ForwardResult:
    visual: Tensor
    decisions: list[RoutingDecision]
    route_logits: Tensor
    bdam_trace: list[BiTemporalFeatures] | None = None


class HiSemModel(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        h, w = cfg.grid
        self.embed = PatchEmbed(cfg.d_in, cfg.d_model, h * w, rng)
        self.bdam = Bdam(cfg.d_model, cfg.bdam_layers, rng, d_hidden=cfg.bdam_hidden, tied=cfg.tied_bdam)
        self.hasd = Hasd(cfg.d_model, cfg.moe, rng, ffn_hidden=cfg.unchanged_ffn)
        self.decoder = DecoderParams(
            cfg.vocab_size, cfg.d_model, rng, n_layers=cfg.decoder_layers, max_len=cfg.max_len, ffn_hidden=cfg.decoder_ffn
        )

    def _features(self, f_t1, f_t2) -> BiTemporalFeatures:
        a = np.asarray(f_t1, dtype=T.DTYPE)
        b = np.asarray(f_t2, dtype=T.DTYPE)
        if a.ndim == 3:
            a, b = a[None], b[None]
        h, w = self.cfg.grid
        if a.shape[1:] != (h, w, self.cfg.d_in) or a.shape != b.shape:
            raise T.ShapeError(f"features {a.shape}/{b.shape} do not match grid {h}x{w} with {self.cfg.d_in} channels")
        n = a.shape[0]
        x1 = self.embed(T.Tensor(a.reshape(n, h * w, -1)))
        x2 = self.embed(T.Tensor(b.reshape(n, h * w, -1)))
        return BiTemporalFeatures(x1, x2, (h, w))

    def forward(self, f_t1, f_t2, routing_override=None, trace: bool = False) -> ForwardResult:
        """Visual tokens ``[B, L, D]`` for raw feature grids ``[B, H, W, D_in]``."""
        x = self._features(f_t1, f_t2)
        if trace:
            x_tilde, steps = self.bdam(x, return_all=True)
        else:
            x_tilde, steps = self.bdam(x), None
        visual, decisions, logits = hasd_forward(x_tilde, self.hasd, routing_override)
        return ForwardResult(visual, decisions, logits, steps)

    def losses(self, f_t1, f_t2, captions: CaptionBatch, labels, routing_override=None, detach_route_logits=False):
        """Caption loss, routing loss and the forward result for one batch.

        ``detach_route_logits`` cuts the classification branch out of the
        graph (the warm-up behaviour).
        """
        res = self.forward(f_t1, f_t2, routing_override)
        logits = decoder_forward(res.visual, captions.inputs(), self.decoder)
        l_cap = caption_loss(logits, captions)
        route_logits = res.route_logits.detach() if detach_route_logits else res.route_logits
        l_cls = routing_loss(route_logits, labels)
        return l_cap, l_cls, res

    def generate(self, f_t1, f_t2, routing_override=None, max_len: int | None = None):
        with T.no_grad():
            res = self.forward(f_t1, f_t2, routing_override)
            ids = generate_greedy(res.visual, self.decoder, max_len)
        return ids, res.decisions
