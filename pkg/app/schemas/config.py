"""
Configuration models. Unknown keys are rejected everywhere.

Defaults describe the desk-scale toy setup; the large setup stays
constructible by overriding fields.
"""
from typing import List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, model_validator

from app.schemas.motion import SkeletonSpec


class TemporalPEConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    k: int = Field(8, ge=1, description="Number of geometric frequencies; output dim is 2k")
    f_min: float = Field(0.5, gt=0.0, description="Lowest frequency, cycles per window")
    f_max: float = Field(64.0, gt=0.0, description="Highest frequency, cycles per window")

    @model_validator(mode="after")
    def _ordered(self) -> "TemporalPEConfig":
        if self.k > 1 and self.f_max <= self.f_min:
            raise ValueError("f_max must exceed f_min when k > 1")
        return self

    @property
    def dim(self) -> int:
        return 2 * self.k


class GraphPEConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    mode: Literal["laplacian", "heat"] = "laplacian"
    dim: int = Field(4, ge=1, description="Output columns per joint")
    heat_times: Tuple[float, ...] = Field((0.1, 0.5, 2.0), description="Diffusion times for heat mode")
    seed: int = Field(0, description="Probe seed for heat mode")

    @model_validator(mode="after")
    def _heat_dim(self) -> "GraphPEConfig":
        if self.mode == "heat":
            if any(t <= 0.0 for t in self.heat_times):
                raise ValueError("heat diffusion times must be > 0")
            if self.dim % len(self.heat_times) != 0:
                raise ValueError(
                    f"heat mode needs dim = len(times) * probes; {self.dim} is not a multiple of {len(self.heat_times)}"
                )
        return self

    @property
    def probes(self) -> int:
        return max(1, self.dim // len(self.heat_times))


class LossWeights(BaseModel):
    """total = rec * (rot + root) + phys * (fk * FK + foot * FOOT)"""

    model_config = ConfigDict(extra="forbid")

    rec: float = Field(0.5, ge=0.0)
    phys: float = Field(0.5, ge=0.0)
    foot: float = Field(0.01, ge=0.0)
    fk: float = Field(1.0, ge=0.0, description="0 disables the FK term")


class ModelConfig(BaseModel):
    """Autoencoder architecture and loss settings."""

    model_config = ConfigDict(extra="forbid")

    channels: int = Field(16, ge=1, description="Latent channels C")
    d_latent: int = Field(32, ge=4, description="Latent curve length N (the axis the DFT sees)")
    joint_latents: int = Field(16, ge=1)
    joint_embed: int = Field(64, ge=1)
    joint_blocks: int = Field(2, ge=0, description="Self-attention blocks after the joint cross-attention")
    root_latents: int = Field(8, ge=1)
    root_embed: int = Field(32, ge=1)
    root_blocks: int = Field(2, ge=0)
    decoder_blocks: int = Field(2, ge=1, description="Query cross-attention blocks per decoder pathway")
    heads: int = Field(4, ge=1)
    mlp_ratio: int = Field(2, ge=1)
    conv_kernel: int = Field(3, ge=1, description="Bottleneck kernel width (odd)")
    temporal_pe: TemporalPEConfig = Field(default_factory=TemporalPEConfig)
    graph_pe: GraphPEConfig = Field(default_factory=GraphPEConfig)
    loss_weights: LossWeights = Field(default_factory=LossWeights)
    length_scale_cm: float = Field(100.0, gt=0.0, description="Positions are divided by this inside the network and losses")
    contact_height: float = Field(2.0, gt=0.0, description="h_c in cm")
    contact_velocity: float = Field(2.0, gt=0.0, description="v_c in cm/s")
    window_frames: int = Field(60, ge=2, description="Frames per training window")
    seed: int = Field(0, description="Initialization seed")

    @model_validator(mode="after")
    def _dims(self) -> "ModelConfig":
        if self.d_latent % 2:
            raise ValueError("d_latent must be even")
        if self.conv_kernel % 2 == 0:
            raise ValueError("conv_kernel must be odd")
        for name in ("joint_embed", "root_embed"):
            if getattr(self, name) % self.heads:
                raise ValueError(f"{name} must be divisible by heads")
        return self

    @property
    def nyquist(self) -> float:
        """Highest frequency the latent grid resolves, N / 2 cycles per window."""
        return self.d_latent / 2.0


class OptimizerConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    lr: float = Field(1e-4, ge=0.0)
    betas: Tuple[float, float] = (0.9, 0.999)
    weight_decay: float = Field(0.01, ge=0.0)
    eps: float = Field(1e-8, gt=0.0)
    max_grad_norm: float = Field(0.5, ge=0.0)
    warmup_fraction: float = Field(0.05, ge=0.0, le=1.0)


class TrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    steps: int = Field(5000, ge=0)
    stop_step: Optional[int] = Field(None, ge=0, description="Stop before this step; the LR schedule still spans `steps`")
    batch_size: int = Field(4, ge=1)
    seed: int = 0
    subsample_times: float = Field(0.75, gt=0.0, le=1.0, description="Fraction of frames used by each step's losses")
    subsample_joints: float = Field(0.75, gt=0.0, le=1.0, description="Fraction of joints in each step's rotation loss")
    log_every: int = Field(100, ge=1)
    optimizer: OptimizerConfig = Field(default_factory=lambda: OptimizerConfig(lr=1e-3))


class DiffusionConfig(BaseModel):
    """Denoiser architecture, noise schedule, sampling and training settings."""

    model_config = ConfigDict(extra="forbid")

    timesteps: int = Field(1000, ge=1, description="T")
    beta_min: float = Field(1e-4, gt=0.0)
    beta_max: float = Field(0.02, lt=1.0)
    embed: int = Field(64, ge=1, description="Token width")
    blocks: int = Field(4, ge=1, description="AdaLN transformer blocks")
    heads: int = Field(4, ge=1)
    mlp_ratio: int = Field(2, ge=1)
    num_classes: int = Field(2, ge=1)
    label_dropout: float = Field(0.1, ge=0.0, le=1.0)
    context_dropout: float = Field(0.3, ge=0.0, le=1.0)
    use_context: bool = Field(True, description="Condition on an encoded partial clip")
    guidance_scale: float = Field(1.0, description="Classifier-free guidance; 1.0 is off")
    min_snr_gamma: float = Field(5.0, gt=0.0)
    sample_steps: int = Field(900, ge=1, description="S")
    eta: float = Field(1.0, ge=0.0)
    use_phase_transform: bool = Field(True, description="False diffuses raw (s, a, f, b)")
    f_max_rule: Literal["latent", "nyquist"] = "latent"
    keyframes: int = Field(6, ge=1, description="Keyframes kept in the context clip during training")
    seed: int = 0
    train: TrainConfig = Field(default_factory=lambda: TrainConfig(steps=3000, batch_size=16,
                                                                  optimizer=OptimizerConfig(lr=1e-3)))

    @model_validator(mode="after")
    def _bounds(self) -> "DiffusionConfig":
        if not self.beta_min < self.beta_max:
            raise ValueError("beta_min must be < beta_max")
        if self.sample_steps > self.timesteps:
            raise ValueError("sample_steps must not exceed timesteps")
        if self.embed % self.heads:
            raise ValueError("embed must be divisible by heads")
        return self


class RunConfig(BaseModel):
    """Validated arguments of one CLI invocation."""

    model_config = ConfigDict(extra="forbid")

    command: Literal["synth", "train-ae", "train-diff", "encode", "decode", "sample", "eval", "plot-phase"]
    out: Optional[str] = Field(None, description="Output directory")
    force: bool = False
    seed: int = Field(0, ge=0)
    config: Optional[str] = Field(None, description="JSON config file")
    manifest: Optional[str] = None
    checkpoint: Optional[str] = Field(None, description="Autoencoder checkpoint")
    diffusion_checkpoint: Optional[str] = None
    resume: Optional[str] = None
    inputs: List[str] = Field(default_factory=list, description="Positional input files")
    gt: Optional[str] = Field(None, description="Ground-truth BVH for eval")
    pred: Optional[str] = Field(None, description="Predicted BVH for eval")
    params_format: Literal["csv", "bin"] = "csv"

    num: int = Field(4, ge=0, description="Clips per class (synth) or samples (sample)")
    classes: int = Field(2, ge=1)
    class_label: Optional[int] = Field(None, ge=0)
    frames: int = Field(60, ge=2)
    frame_rate: float = Field(60.0, gt=0.0)
    skeleton: SkeletonSpec = Field(default_factory=SkeletonSpec)
    stride: int = Field(60, ge=1)

    unit_scale: float = Field(1.0, gt=0.0, description="BVH file units to cm")
    reference: Optional[str] = Field(None, description="BVH whose skeleton decoded motion is bound to")

    rate: Optional[float] = Field(None, gt=0.0, description="Decode frame rate")
    joints: Optional[List[str]] = Field(None, description="Joint names to decode")
    condition_clip: Optional[str] = None
    mask: Optional[str] = Field(None, description="keyframes | left-leg | right-leg | spine")
    keyframes: int = Field(6, ge=1)
    keyframe_distance: Optional[int] = Field(None, ge=1)
    contact_height: float = Field(2.0, gt=0.0)
    contact_velocity: float = Field(2.0, gt=0.0)
    pca_dims: int = Field(2, ge=2, le=3)
    trajectory_stride: int = Field(1, ge=1, description="Frames between phase-trajectory windows")

    model: ModelConfig = Field(default_factory=ModelConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    diffusion: DiffusionConfig = Field(default_factory=DiffusionConfig)
