"""Degradation-driven training: on-the-fly label synthesis, the three-term L1
objective, and an Adam loop with step-halving learning rate."""
from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Iterable

import numpy as np
import torch

from .degradation import (
    AnisoKernelSpec,
    DegradationConfig,
    IsoKernelSpec,
    blur,
    decompose_labels,
    load_image,
    make_kernel,
    training_width_range,
)
from .model import CDCN, ModelConfig, ModelOutput, load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)

ADAM_BETAS = (0.9, 0.99)
ADAM_EPS = 1e-8
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")
LOSS_TERMS = ("structure", "detail", "sr")


class NonFiniteLossError(RuntimeError):
    pass


@dataclass(frozen=True)
class LossToggles:
    structure: bool = True
    detail: bool = True
    sr: bool = True

    def enabled(self) -> tuple[str, ...]:
        return tuple(t for t in LOSS_TERMS if getattr(self, t))

    @classmethod
    def parse(cls, text: str) -> "LossToggles":
        names = {t.strip() for t in text.replace(" ", ",").split(",") if t.strip()}
        names.discard("none")
        unknown = names - set(LOSS_TERMS)
        if unknown:
            raise ValueError(f"unknown loss terms {sorted(unknown)}")
        return cls(**{t: t in names for t in LOSS_TERMS})

    def __str__(self):
        return ",".join(self.enabled()) or "none"


# loss-ablation variants as (ablation, toggles)
LOSS_ABLATIONS = {
    "model1": ("no_decomposition", LossToggles(False, False, True)),
    "model2": ("full", LossToggles(False, False, True)),
    "model3": ("full", LossToggles(True, False, True)),
    "model4": ("full", LossToggles(False, True, True)),
    "model5": ("full", LossToggles(True, True, True)),
}
# collaboration-block variants
BLOCK_ABLATIONS = {
    "wo_all": "plain_block",
    "wo_co": "no_collab",
    "w_fc": "fuse_concat",
    "w_ea": "fuse_add",
}


@dataclass
class TrainConfig:
    """Training settings.

    ``patch_size`` is the LR patch side; the HR crop is ``patch_size * scale``.
    Set ``patch_on_hr`` to read it as the HR side instead.
    """

    scale: int = 4
    patch_size: int = 64
    batch_size: int = 16
    total_iters: int = 20000
    lr_init: float = 2e-4
    lr_halve_every: int = 5000
    kernel_mode: str = "isotropic"
    width_range: tuple[float, float] | None = None
    loss_toggles: LossToggles = field(default_factory=LossToggles)
    seed: int = 0
    checkpoint_every: int = 1000
    patch_on_hr: bool = False
    kernel_size: int = 21

    def __post_init__(self):
        if self.width_range is None:
            self.width_range = training_width_range(self.scale)
        self.width_range = tuple(float(v) for v in self.width_range)
        if self.kernel_mode not in ("isotropic", "anisotropic"):
            raise ValueError(f"kernel_mode must be isotropic or anisotropic, got {self.kernel_mode!r}")
        if not self.lr_init > 0:
            raise ValueError("lr_init must be positive")
        if self.lr_halve_every < 1 or self.batch_size < 1 or self.patch_size < 1:
            raise ValueError("lr_halve_every, batch_size and patch_size must be >= 1")
        if self.patch_on_hr and self.patch_size % self.scale:
            raise ValueError(f"HR patch_size {self.patch_size} not divisible by scale {self.scale}")
        if not self.loss_toggles.enabled():
            raise ValueError("at least one loss term must be enabled")
        lo, hi = self.width_range
        if not 0 < lo <= hi:
            raise ValueError(f"bad width_range {self.width_range}")

    @property
    def hr_patch(self) -> int:
        return self.patch_size if self.patch_on_hr else self.patch_size * self.scale

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["loss_toggles"] = str(self.loss_toggles)
        d["width_range"] = list(self.width_range)
        return d


# ---------------------------------------------------------------------------
# config files: flat ``key = value``
# ---------------------------------------------------------------------------

def _coerce(name, text, typ):
    text = text.strip()
    if name == "loss_toggles":
        return LossToggles.parse(text)
    if name == "width_range":
        lo, hi = (float(v) for v in text.replace(" ", "").split(","))
        return (lo, hi)
    if typ in (bool, "bool"):
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{name}: expected a boolean, got {text!r}")
    if typ in (int, "int"):
        return int(float(text)) if "e" in text.lower() else int(text)
    if typ in (float, "float"):
        return float(text)
    return text


def parse_config(text: str, overrides: dict | None = None) -> tuple[TrainConfig, ModelConfig]:
    """Parse a flat config. Keys are TrainConfig and ModelConfig field names."""
    tfields = {f.name: f.type for f in fields(TrainConfig)}
    mfields = {f.name: f.type for f in fields(ModelConfig)}
    raw = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value'")
        key, val = (p.strip() for p in line.split("=", 1))
        if key not in tfields and key not in mfields:
            raise ValueError(f"line {lineno}: unknown key {key!r}")
        raw[key] = val
    raw.update({k: str(v) for k, v in (overrides or {}).items() if v is not None})
    tkw, mkw = {}, {}
    for key, val in raw.items():
        if key in tfields:
            tkw[key] = _coerce(key, val, tfields[key])
        if key in mfields:
            mkw[key] = _coerce(key, val, mfields[key])
    return TrainConfig(**tkw), ModelConfig(**mkw)


def read_config(path, overrides: dict | None = None) -> tuple[TrainConfig, ModelConfig]:
    return parse_config(Path(path).read_text(), overrides)


def format_config(cfg: TrainConfig, mcfg: ModelConfig) -> str:
    lines = [f"{k} = {','.join(map(repr, v)) if isinstance(v, list) else v}"
             for k, v in cfg.to_dict().items()]
    lines += [f"{k} = {v}" for k, v in dataclasses.asdict(mcfg).items() if k != "scale"]
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def _t(x):
    return x if torch.is_tensor(x) else torch.as_tensor(np.asarray(x))


def _l1(a, b):
    a, b = _t(a), _t(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    return torch.mean(torch.abs(a - b))


def loss_structure(structure_hat, structure_label):
    return _l1(structure_hat, structure_label)


def loss_detail(detail_hat, hr, k_g):
    """L1 against the detail label ``hr - hr * k_g`` built here from an HxWxC image."""
    hr = np.asarray(hr, dtype=np.float64)
    label = hr - blur(hr, k_g).reshape(hr.shape)
    return _l1(detail_hat, label)


def loss_sr(sr, hr):
    return _l1(sr, hr)


def loss_terms(output: ModelOutput, structure, detail, hr) -> dict:
    terms = {"sr": loss_sr(output.sr, hr)}
    if output.structure_hat is not None:
        terms["structure"] = loss_structure(output.structure_hat, structure)
    if output.detail_hat is not None:
        terms["detail"] = _l1(output.detail_hat, detail)
    return terms


def total_loss(output: ModelOutput, triple, hr, toggles: LossToggles = LossToggles()):
    """Unweighted sum of the enabled L1 terms. ``triple`` carries HR-size
    ``structure`` and ``detail`` labels in the same layout as the outputs."""
    enabled = toggles.enabled()
    if not enabled:
        raise ValueError("no loss terms enabled")
    terms = loss_terms(output, triple.structure, triple.detail, hr)
    missing = [t for t in enabled if t not in terms]
    if missing:
        raise ValueError(f"model does not produce outputs for loss terms {missing}")
    return sum(terms[t] for t in enabled)


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------

def augment(img: np.ndarray, k: int) -> np.ndarray:
    """Element ``k`` (0..7) of the dihedral group: ``k % 4`` quarter turns,
    then a horizontal flip when ``k >= 4``."""
    out = np.rot90(img, k % 4, axes=(0, 1))
    if k >= 4:
        out = out[:, ::-1]
    return np.ascontiguousarray(out)


def draw_kernel(cfg: TrainConfig, rng: np.random.Generator):
    if cfg.kernel_mode == "isotropic":
        lo, hi = cfg.width_range
        spec = IsoKernelSpec(float(rng.uniform(lo, hi)) if hi > lo else lo, cfg.kernel_size)
    else:
        spec = AnisoKernelSpec.random(rng)
    return spec, make_kernel(spec)


def sample_patch(hr_pool, cfg: TrainConfig, rng: np.random.Generator):
    """One augmented HR crop with its own kernel and labels."""
    if not hr_pool:
        raise ValueError("empty HR pool")
    img = hr_pool[int(rng.integers(len(hr_pool)))]
    side = cfg.hr_patch
    h, w = img.shape[:2]
    if h < side or w < side:
        raise ValueError(f"image {h}x{w} smaller than crop {side}")
    top = int(rng.integers(h - side + 1))
    left = int(rng.integers(w - side + 1))
    patch = augment(img[top:top + side, left:left + side], int(rng.integers(8)))
    spec, k_g = draw_kernel(cfg, rng)
    triple = decompose_labels(patch, k_g, DegradationConfig(cfg.scale, spec))
    triple.meta["kernel"] = spec.describe()
    return patch, k_g, triple


def to_tensor(img) -> torch.Tensor:
    """HxWxC numpy image -> 1xCxHxW float32 tensor."""
    return torch.from_numpy(np.ascontiguousarray(np.asarray(img).transpose(2, 0, 1))).float()[None]


def from_tensor(t: torch.Tensor) -> np.ndarray:
    return t.detach().cpu().double().numpy()[0].transpose(1, 2, 0)


@dataclass
class Batch:
    lr: torch.Tensor
    hr: torch.Tensor
    structure: torch.Tensor
    detail: torch.Tensor


def make_batch(samples: Iterable, dtype=torch.float32) -> Batch:
    lr, hr, st, de = [], [], [], []
    for patch, _, triple in samples:
        lr.append(to_tensor(triple.lr))
        hr.append(to_tensor(patch))
        st.append(to_tensor(triple.structure))
        de.append(to_tensor(triple.detail))
    return Batch(*(torch.cat(x).to(dtype) for x in (lr, hr, st, de)))


def load_pool(data_dir) -> list[np.ndarray]:
    paths = sorted(p for p in Path(data_dir).iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not paths:
        raise FileNotFoundError(f"no HR images in {data_dir}")
    return [load_image(p) for p in paths]


# ---------------------------------------------------------------------------
# optimisation
# ---------------------------------------------------------------------------

def lr_schedule(it: int, cfg: TrainConfig) -> float:
    if it < 0:
        raise ValueError("iteration must be >= 0")
    return cfg.lr_init * 0.5 ** (it // cfg.lr_halve_every)


@dataclass
class TrainState:
    model: CDCN
    optimizer: torch.optim.Adam
    rng: np.random.Generator
    iter: int = 0

    @classmethod
    def fresh(cls, mcfg: ModelConfig, cfg: TrainConfig) -> "TrainState":
        model = CDCN(mcfg, seed=cfg.seed)
        opt = torch.optim.Adam(model.parameters(), lr=cfg.lr_init, betas=ADAM_BETAS, eps=ADAM_EPS)
        return cls(model, opt, np.random.default_rng(cfg.seed))


def train_step(state: TrainState, batch: Batch, cfg: TrainConfig):
    """One Adam update. Returns (state, total loss, per-term losses)."""
    lr = lr_schedule(state.iter, cfg)
    for g in state.optimizer.param_groups:
        g["lr"] = lr
    state.model.train()
    state.optimizer.zero_grad(set_to_none=True)
    out = state.model(batch.lr)
    terms = loss_terms(out, batch.structure, batch.detail, batch.hr)
    loss = total_loss(out, batch, batch.hr, cfg.loss_toggles)
    if not torch.isfinite(loss):
        raise NonFiniteLossError(f"non-finite loss {loss.item()} at iteration {state.iter}")
    loss.backward()
    state.optimizer.step()
    state.iter += 1
    return state, float(loss.item()), {k: float(v.item()) for k, v in terms.items()}


def _optimizer_arrays(state: TrainState) -> dict:
    arrays = {}
    names = {id(p): n for n, p in state.model.named_parameters()}
    for p, st in state.optimizer.state.items():
        n = names[id(p)]
        arrays[f"optim.exp_avg/{n}"] = st["exp_avg"]
        arrays[f"optim.exp_avg_sq/{n}"] = st["exp_avg_sq"]
        arrays[f"optim.step/{n}"] = torch.as_tensor(st["step"]).reshape(1)
    return arrays


def save_state(path, state: TrainState, cfg: TrainConfig) -> None:
    extra = {"iter": state.iter, "train_config": cfg.to_dict(),
             "rng_state": state.rng.bit_generator.state}
    save_checkpoint(path, state.model, _optimizer_arrays(state), extra)


def load_state(path, cfg: TrainConfig, mcfg: ModelConfig | None = None) -> TrainState:
    model, header, rest = load_checkpoint(path, mcfg)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr_init, betas=ADAM_BETAS, eps=ADAM_EPS)
    for n, p in model.named_parameters():
        key = f"optim.exp_avg/{n}"
        if key in rest:
            opt.state[p] = {
                "step": torch.tensor(float(rest[f"optim.step/{n}"][0])),
                "exp_avg": torch.from_numpy(rest[key]),
                "exp_avg_sq": torch.from_numpy(rest[f"optim.exp_avg_sq/{n}"]),
            }
    rng = np.random.default_rng()
    extra = header["extra"]
    if "rng_state" in extra:
        rng.bit_generator.state = extra["rng_state"]
    return TrainState(model, opt, rng, int(extra.get("iter", 0)))


def _fmt(v):
    return "nan" if v is None else f"{v:.8g}"


def train(cfg: TrainConfig, mcfg: ModelConfig, data_dir, out_dir, resume=None) -> TrainState:
    """Run the loop, writing ``ckpt_XXXXXXX.cdcn`` files and ``loss.log``."""
    if mcfg.scale != cfg.scale:
        raise ValueError(f"model scale {mcfg.scale} != training scale {cfg.scale}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    pool = load_pool(data_dir)
    torch.manual_seed(cfg.seed)
    if resume:
        state = load_state(resume, cfg, mcfg)
    else:
        state = TrainState.fresh(mcfg, cfg)
        save_state(out / f"ckpt_{0:07d}.cdcn", state, cfg)
    log_path = out / "loss.log"
    mode = "a" if resume else "w"
    with open(log_path, mode) as f:
        while state.iter < cfg.total_iters:
            batch = make_batch(sample_patch(pool, cfg, state.rng) for _ in range(cfg.batch_size))
            lr = lr_schedule(state.iter, cfg)
            try:
                state, loss, terms = train_step(state, batch, cfg)
            except NonFiniteLossError:
                save_state(out / "ckpt_last_good.cdcn", state, cfg)
                raise
            f.write(" ".join([str(state.iter), _fmt(loss)]
                             + [_fmt(terms.get(t)) for t in LOSS_TERMS] + [f"{lr:.8g}"]) + "\n")
            f.flush()
            if state.iter % cfg.checkpoint_every == 0 or state.iter == cfg.total_iters:
                save_state(out / f"ckpt_{state.iter:07d}.cdcn", state, cfg)
                log.info("iter %d loss %.6g, saved checkpoint", state.iter, loss)
    return state


def read_loss_log(path) -> np.ndarray:
    """Rows of (iter, total, L_structure, L_detail, L_SR, lr)."""
    rows = [[float(v) for v in ln.split()] for ln in Path(path).read_text().splitlines() if ln.strip()]
    return np.array(rows, dtype=np.float64).reshape(-1, 6)
