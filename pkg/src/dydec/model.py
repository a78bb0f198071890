"""Full counting model: dyadic front-end, backbone, and count head."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .autodiff import GradTape, Var, mean_last, record, scalar_affine
from .backbone import DEFAULT_PLAN, BackboneParams, init_backbone, run_backbone
from .egnorm import EgNormParams, PARAM_FLOOR
from .filterbank import DyadicTree, clamp_cutoffs, init_dyadic_tree
from .frontend import BatchNormState, run_cascade

HEADS = ("density", "reg_count")


@dataclass
class ModelConfig:
    depth: int = 8
    band_top: float = 12000.0
    kernel_len: int = 1025
    base_sample_rate: float = 24000.0
    downsample_depths: tuple[int, ...] | None = None  # None -> first min(depth, 5) stages
    window: str = "hamming"
    backbone_plan: tuple = DEFAULT_PLAN
    lowpass_len: int = 63
    mode: str = "dyadic"  # dyadic | single_scale
    norm: str = "egnorm"  # egnorm | batchnorm | none
    head: str = "density"  # density | reg_count
    seed: int = 0

    def to_jsonable(self) -> dict:
        out = asdict(self)
        out["backbone_plan"] = [list(p) for p in self.backbone_plan]
        if self.downsample_depths is not None:
            out["downsample_depths"] = list(self.downsample_depths)
        return out

    @classmethod
    def from_jsonable(cls, data: dict) -> "ModelConfig":
        data = dict(data)
        data["backbone_plan"] = tuple(
            (None if s is None else int(s), int(c)) for s, c in data["backbone_plan"]
        )
        if data.get("downsample_depths") is not None:
            data["downsample_depths"] = tuple(data["downsample_depths"])
        return cls(**data)


class DyDecModel:
    """Owns the tree, backbone and head parameters plus ablation flags."""

    def __init__(self, config: ModelConfig, tree: DyadicTree, backbone: BackboneParams):
        if config.head not in HEADS:
            raise ValueError(f"unknown head {config.head!r}, expected one of {HEADS}")
        self.config = config
        self.tree = tree
        self.backbone = backbone
        self.head_weight = np.asarray(1.0)
        self.head_bias = np.asarray(0.0)
        self.bn_state = BatchNormState() if config.norm == "batchnorm" else None
        self._leaf_vars: dict[str, Var] = {}

    # -- construction -------------------------------------------------------

    @classmethod
    def build(cls, config: ModelConfig) -> "DyDecModel":
        tree = init_dyadic_tree(
            depth=config.depth,
            band_top=config.band_top,
            kernel_len=config.kernel_len,
            base_sample_rate=config.base_sample_rate,
            downsample_depths=(
                frozenset(config.downsample_depths)
                if config.downsample_depths is not None
                else None
            ),
            window=config.window,
        )
        frame_rate = config.base_sample_rate / 2**tree.n_decimations
        rng = np.random.default_rng(np.random.SeedSequence((config.seed, 0xB0)))
        backbone = init_backbone(
            n_channels=tree.n_leaves,
            input_rate=frame_rate,
            plan=config.backbone_plan,
            lowpass_len=config.lowpass_len,
            window=config.window,
            rng=rng,
        )
        return cls(config, tree, backbone)

    # -- geometry ------------------------------------------------------------

    @property
    def total_decimation(self) -> int:
        return 2**self.tree.n_decimations

    def output_frames(self, n_samples: int) -> int:
        frames = n_samples // self.total_decimation
        if frames % self.backbone.stride_product != 0:
            raise ValueError(
                f"{frames} front-end frames not divisible by backbone strides "
                f"{self.backbone.stride_product}"
            )
        return frames // self.backbone.stride_product

    # -- parameter registry ---------------------------------------------------

    def parameters(self) -> dict[str, np.ndarray]:
        """Current values of every trainable parameter, in a stable order."""
        out: dict[str, np.ndarray] = {}
        for d, i, filt, eg in self.tree.iter_nodes():
            out[f"tree.{d}.{i}.f_low"] = np.asarray(filt.f_low)
            out[f"tree.{d}.{i}.f_high"] = np.asarray(filt.f_high)
            if self.config.norm == "egnorm":
                out[f"tree.{d}.{i}.sigma"] = np.asarray(eg.sigma)
                out[f"tree.{d}.{i}.alpha"] = np.asarray(eg.alpha)
                out[f"tree.{d}.{i}.delta"] = np.asarray(eg.delta)
                out[f"tree.{d}.{i}.gamma"] = np.asarray(eg.gamma)
        for j, stage in enumerate(self.backbone.stages):
            if stage.cutoffs is not None:
                out[f"bb.{j}.cutoffs"] = stage.cutoffs
            out[f"bb.{j}.weight"] = stage.weight
            out[f"bb.{j}.bias"] = stage.bias
        out["bb.out.weight"] = self.backbone.out_weight
        out["bb.out.bias"] = self.backbone.out_bias
        if self.config.head == "reg_count":
            out["head.weight"] = self.head_weight
            out["head.bias"] = self.head_bias
        return out

    def set_parameter(self, name: str, value: np.ndarray) -> None:
        value = np.asarray(value, dtype=np.float64)
        parts = name.split(".")
        if parts[0] == "tree":
            d, i, fieldname = int(parts[1]), int(parts[2]), parts[3]
            if fieldname in ("f_low", "f_high"):
                setattr(self.tree.node(d, i), fieldname, float(value))
            else:
                setattr(self.tree.egnorm_at(d, i), fieldname, float(value))
        elif parts[0] == "bb" and parts[1] == "out":
            if parts[2] == "weight":
                self.backbone.out_weight = value
            else:
                self.backbone.out_bias = value
        elif parts[0] == "bb":
            stage = self.backbone.stages[int(parts[1])]
            setattr(stage, parts[2], value)
        elif parts[0] == "head":
            setattr(self, f"head_{parts[1]}", value)
        else:
            raise KeyError(f"unknown parameter {name!r}")

    def load_parameters(self, values: dict[str, np.ndarray]) -> None:
        for name, value in values.items():
            self.set_parameter(name, value)

    # -- forward ---------------------------------------------------------------

    def _leaf(self, name: str, value, trainable: bool) -> Var:
        var = Var(value, requires_grad=trainable)
        self._leaf_vars[name] = var
        return var

    def _build_pvars(self, trainable: bool):
        self._leaf_vars = {}
        egnorm_trainable = trainable and self.config.norm == "egnorm"
        tree_pvars = []
        for d in range(1, self.tree.depth + 1):
            row = []
            for i in range(2**d):
                filt = self.tree.node(d, i)
                eg = self.tree.egnorm_at(d, i)
                row.append(
                    {
                        "f_low": self._leaf(f"tree.{d}.{i}.f_low", filt.f_low, trainable),
                        "f_high": self._leaf(f"tree.{d}.{i}.f_high", filt.f_high, trainable),
                        "sigma": self._leaf(f"tree.{d}.{i}.sigma", eg.sigma, egnorm_trainable),
                        "alpha": self._leaf(f"tree.{d}.{i}.alpha", eg.alpha, egnorm_trainable),
                        "delta": self._leaf(f"tree.{d}.{i}.delta", eg.delta, egnorm_trainable),
                        "gamma": self._leaf(f"tree.{d}.{i}.gamma", eg.gamma, egnorm_trainable),
                    }
                )
            tree_pvars.append(row)
        bb_pvars = []
        for j, stage in enumerate(self.backbone.stages):
            bb_pvars.append(
                {
                    "cutoffs": (
                        self._leaf(f"bb.{j}.cutoffs", stage.cutoffs, trainable)
                        if stage.cutoffs is not None
                        else None
                    ),
                    "weight": self._leaf(f"bb.{j}.weight", stage.weight, trainable),
                    "bias": self._leaf(f"bb.{j}.bias", stage.bias, trainable),
                }
            )
        bb_pvars.append(
            {
                "weight": self._leaf("bb.out.weight", self.backbone.out_weight, trainable),
                "bias": self._leaf("bb.out.bias", self.backbone.out_bias, trainable),
            }
        )
        if self.config.head == "reg_count":
            self._leaf("head.weight", self.head_weight, trainable)
            self._leaf("head.bias", self.head_bias, trainable)
        return tree_pvars, bb_pvars

    def forward(
        self,
        tape: GradTape | None,
        x: np.ndarray,
        training: bool = False,
        trainable: bool = True,
        frozen_frontend: bool = False,
    ) -> Var:
        """Frame scores [B, T_out] for a [B, N] batch."""
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2:
            raise ValueError(f"expected [batch, samples], got shape {x.shape}")
        tree_pvars, bb_pvars = self._build_pvars(trainable and tape is not None)
        if frozen_frontend:
            for row in tree_pvars:
                for nv in row:
                    for var in nv.values():
                        var.requires_grad = False
        tf = run_cascade(
            tape,
            Var(x),
            self.tree,
            pvars=tree_pvars,
            mode=self.config.mode,
            norm=self.config.norm,
            bn_state=self.bn_state,
            training=training,
        )
        return run_backbone(tape, tf, self.backbone, pvars=bb_pvars)

    def head_counts(self, tape: GradTape | None, scores: Var) -> Var:
        """Per-clip predicted counts from frame scores, respecting the head."""
        if self.config.head == "reg_count":
            w = self._leaf_vars.get("head.weight")
            if w is None:
                w = self._leaf("head.weight", self.head_weight, False)
            b = self._leaf_vars.get("head.bias")
            if b is None:
                b = self._leaf("head.bias", self.head_bias, False)
            return scalar_affine(tape, mean_last(tape, scores), w, b)
        # density head: the count is the vector integral
        n = scores.data.shape[-1]
        return record(
            tape,
            scores.data.sum(axis=-1),
            (scores,),
            lambda g: (np.repeat(g[..., None], n, axis=-1),),
        )

    def collect_gradients(self) -> dict[str, np.ndarray]:
        """Gradients of the last backward pass, zeros where a param was unused."""
        grads = {}
        for name, value in self.parameters().items():
            var = self._leaf_vars.get(name)
            if var is None or var.grad is None:
                grads[name] = np.zeros_like(np.asarray(value, dtype=np.float64))
            else:
                grads[name] = var.grad
        return grads

    # -- constraints ------------------------------------------------------------

    def apply_constraints(self) -> None:
        """Clamp cutoffs and eg-norm positivity after an optimizer step.

        Tree cutoffs clamp against the tree band top (base-axis ceiling), not
        each node's local Nyquist: deep nodes legitimately store base-axis
        cutoffs above their decimated rate's Nyquist.
        """
        for d in range(1, self.tree.depth + 1):
            for i in range(2**d):
                node = self.tree.node(d, i)
                clamped = clamp_cutoffs(node, ceiling_hz=self.tree.band_top)
                node.f_low, node.f_high = clamped.f_low, clamped.f_high
                self.tree.egnorm[d - 1][i] = self.tree.egnorm_at(d, i).clamped()
        for j, stage in enumerate(self.backbone.stages):
            if stage.cutoffs is not None:
                nyq = self.backbone.stage_rate(j) / 2.0
                stage.cutoffs = np.clip(stage.cutoffs, PARAM_FLOOR, nyq * (1.0 - 1e-3))
