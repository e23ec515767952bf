"""Training, checkpointing and evaluation of the deep kernel network."""

from __future__ import annotations

import copy
import csv
import io
import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import __version__, dkt
from .autodiff import Tensor, backward, mse_loss, no_grad
from .constraints import ConstraintConfig, InfoConstraints, discriminator_step
from .metrics import psnr, psnr_standard, regional_bias_variance, region_masks, ssim
from .network import DeepKernelNet, NetworkConfig
from .optim import Adam, NumericalError, clip_grad_norm
from .phantom import REGIONS, load_case, load_manifest

log = logging.getLogger(__name__)


class ConfigSchemaError(ValueError):
    """Experiment configuration has unknown or ill-typed keys."""

    def __init__(self, problems: Sequence[str]):
        self.problems = list(problems)
        super().__init__("invalid experiment config: " + "; ".join(self.problems))


class NumericalAbort(RuntimeError):
    pass


class MissingArtifactError(FileNotFoundError):
    pass


# -- configuration ------------------------------------------------------------
@dataclass
class OptimiserConfig:
    base_lr: float = 1e-4
    decay: float = 0.99
    decay_every: float = 100
    clip_norm: float = 10.0
    disc_lr: float = 1e-4


@dataclass
class TrainingConfig:
    batch_size: int = 8
    epochs: int = 50
    max_batches: Optional[int] = None
    train_drf: int = 20
    eval_drfs: list = field(default_factory=lambda: [20, 100, 200, 500, 1000])
    fold: int = 0
    n_folds: int = 5
    n_val: int = 2
    seed: int = 0
    augment: bool = True


@dataclass
class ExperimentConfig:
    network: NetworkConfig = field(default_factory=NetworkConfig)
    constraints: ConstraintConfig = field(default_factory=ConstraintConfig)
    optimiser: OptimiserConfig = field(default_factory=OptimiserConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)

    def to_dict(self) -> dict:
        cons = asdict(self.constraints)
        cons["min_taps"] = list(cons["min_taps"])
        return {
            "network": self.network.to_dict(),
            "constraints": cons,
            "optimiser": asdict(self.optimiser),
            "training": asdict(self.training),
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        sections = {
            "network": NetworkConfig,
            "constraints": ConstraintConfig,
            "optimiser": OptimiserConfig,
            "training": TrainingConfig,
        }
        problems = []
        if not isinstance(raw, dict):
            raise ConfigSchemaError(["top level must be an object"])
        for key in raw:
            if key not in sections:
                problems.append(f"unknown key '{key}'")
        built = {}
        for name, klass in sections.items():
            sub = raw.get(name, {})
            if not isinstance(sub, dict):
                problems.append(f"'{name}' must be an object")
                continue
            known = {f.name: f for f in fields(klass)}
            for key, value in sub.items():
                if key not in known:
                    problems.append(f"unknown key '{name}.{key}'")
                elif not _type_ok(known[key], value):
                    problems.append(f"bad type for '{name}.{key}': {value!r}")
            if not problems:
                try:
                    built[name] = klass(**sub)
                except (TypeError, ValueError) as exc:
                    problems.append(f"'{name}': {exc}")
        if problems:
            raise ConfigSchemaError(problems)
        return cls(**built)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def _type_ok(f, value) -> bool:
    if value is None:
        return "Optional" in str(f.type) or f.default is None
    t = str(f.type)
    if "Sequence" in t or "list" in t:
        return isinstance(value, (list, tuple))
    if t == "bool":
        return isinstance(value, bool)
    if "int" in t and "float" not in t:
        return isinstance(value, int) and not isinstance(value, bool)
    if "float" in t:
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if t == "str":
        return isinstance(value, str)
    return True


# -- cross validation ---------------------------------------------------------
def cross_validation_split(n_cases: int, n_folds: int, seed: int, n_val: int = 2) -> list[dict]:
    """Disjoint test folds covering all cases; validation cases come from the
    following fold and training takes the rest."""
    if n_folds < 1 or n_folds > n_cases:
        raise ValueError(f"cannot split {n_cases} cases into {n_folds} folds")
    order = np.random.default_rng(np.random.SeedSequence([seed, 0xF01D])).permutation(n_cases)
    tests = [sorted(int(i) for i in chunk) for chunk in np.array_split(order, n_folds)]
    folds = []
    for k, test in enumerate(tests):
        nxt = tests[(k + 1) % n_folds] if n_folds > 1 else []
        val = [i for i in nxt if i not in test][: max(0, n_val)]
        train = sorted(set(range(n_cases)) - set(test) - set(val))
        folds.append({"train": train, "val": val, "test": test})
    return folds


# -- data ---------------------------------------------------------------------
@dataclass
class SampleSet:
    pet: np.ndarray
    t1: np.ndarray
    t2: np.ndarray
    target: np.ndarray
    case_index: np.ndarray
    slice_index: np.ndarray

    def __len__(self) -> int:
        return len(self.pet)


def slab_samples(case, drf: int, slices: int) -> SampleSet:
    """Every full slab of ``slices`` adjacent slices, channel-last, centre-slice target."""
    half = slices // 2
    depth = case.activity.shape[0]
    centres = list(range(half, depth - half))
    vol = case.low_dose[drf] if drf != 1 else case.std

    def slab(v, c):
        return np.moveaxis(v[c - half : c + half + 1], 0, -1)

    return SampleSet(
        pet=np.stack([slab(vol, c) for c in centres]),
        t1=np.stack([slab(case.t1, c) for c in centres]),
        t2=np.stack([slab(case.t2, c) for c in centres]),
        target=np.stack([case.std[c][..., None] for c in centres]),
        case_index=np.zeros(len(centres), dtype=np.int64),
        slice_index=np.asarray(centres),
    )


def load_samples(data_dir, manifest: dict, case_ids: Sequence[int], drf: int, slices: int) -> SampleSet:
    parts = []
    for ci in case_ids:
        case = load_case(data_dir, manifest["cases"][ci], [drf])
        if drf != 1 and drf not in case.low_dose:
            raise MissingArtifactError(f"case {ci} has no reconstruction at DRF {drf}")
        s = slab_samples(case, drf, slices)
        s.case_index[:] = ci
        parts.append(s)
    return SampleSet(*(np.concatenate([getattr(p, f.name) for p in parts]) for f in fields(SampleSet)))


# -- run manifest -------------------------------------------------------------
@dataclass
class RunManifest:
    config: dict
    seeds: dict
    fold: dict
    pet_scale: float
    train_drf: int
    code_version: str = __version__
    epochs: list = field(default_factory=list)
    batches: list = field(default_factory=list)
    validation: dict = field(default_factory=dict)
    evaluation: list = field(default_factory=list)
    status: str = "running"

    def to_dict(self) -> dict:
        return asdict(self)

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1, sort_keys=True)

    @classmethod
    def load(cls, path) -> "RunManifest":
        with open(path) as fh:
            return cls(**json.load(fh))


# -- checkpoints --------------------------------------------------------------
def _save_tensors(directory: Path, state: dict[str, np.ndarray]) -> list[str]:
    directory.mkdir(parents=True, exist_ok=True)
    names = sorted(state)
    for name in names:
        dkt.save(directory / f"{name}.dkt1", state[name])
    return names


def _load_tensors(directory: Path, names: Sequence[str]) -> dict[str, np.ndarray]:
    return {name: dkt.load(directory / f"{name}.dkt1") for name in names}


@dataclass
class Model:
    """A trained network together with the intensity scale it was trained at."""

    net: DeepKernelNet
    pet_scale: float
    config: ExperimentConfig
    constraints: Optional[InfoConstraints] = None

    def predict(self, samples: SampleSet, batch_size: int = 8) -> np.ndarray:
        """Eval-mode prediction in activity units, ``[M, H, W]``."""
        self.net.eval()
        dtype = self.net.dtype
        outs = []
        with no_grad():
            for start in range(0, len(samples), batch_size):
                sl = slice(start, start + batch_size)
                out, _ = self.net(
                    (samples.pet[sl] / self.pet_scale).astype(dtype),
                    samples.t1[sl].astype(dtype),
                    samples.t2[sl].astype(dtype),
                )
                outs.append(out.data[..., 0].astype(np.float64) * self.pet_scale)
        return np.concatenate(outs)


def save_checkpoint(path, model: Model, optimisers: dict[str, Adam], manifest: RunManifest) -> None:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    index = {
        "format": "deepkernel-checkpoint/1",
        "config": model.config.to_dict(),
        "layer_specs": [],
        "pet_scale": model.pet_scale,
        "train_drf": manifest.train_drf,
        "seeds": manifest.seeds,
        "fold": manifest.fold,
        "code_version": __version__,
        "tensors": {},
        "optimiser_state": {},
    }
    index["tensors"]["net"] = _save_tensors(root / "net", model.net.state_dict())
    if model.constraints is not None:
        for name, mod in model.constraints.modules().items():
            index["tensors"][name] = _save_tensors(root / name, mod.state_dict())
    for name, opt in optimisers.items():
        index["optimiser_state"][name] = _save_tensors(root / "optim" / name, opt.state_dict())
    with open(root / "checkpoint.json", "w") as fh:
        json.dump(index, fh, indent=1, sort_keys=True)
    manifest.save(root / "run_manifest.json")


def load_checkpoint(path) -> tuple[Model, dict]:
    root = Path(path)
    index_path = root / "checkpoint.json"
    if not index_path.exists():
        raise MissingArtifactError(f"no checkpoint at {root}")
    with open(index_path) as fh:
        index = json.load(fh)
    config = ExperimentConfig.from_dict(index["config"])
    net = DeepKernelNet(config.network, seed=index["seeds"]["network"])
    net.load_state_dict(_load_tensors(root / "net", index["tensors"]["net"]))
    return Model(net, float(index["pet_scale"]), config), index


# -- training -----------------------------------------------------------------
def _seeds(seed: int) -> dict:
    ss = np.random.SeedSequence(seed)
    children = ss.spawn(3)
    return {
        "base": seed,
        "network": int(children[0].generate_state(1)[0]),
        "discriminators": int(children[1].generate_state(1)[0]),
        "data": int(children[2].generate_state(1)[0]),
    }


def train(
    config: ExperimentConfig,
    data_dir,
    out_dir=None,
    callback: Optional[Callable[[dict], None]] = None,
) -> tuple[RunManifest, Model]:
    """Fit the network on the training split of ``config.training.fold``.

    Each batch: forward, ``L_total = L_data + g_max L_max + g_min L_min``,
    backward, Adam step on the network, then one step for each enabled
    discriminator on detached features with batch-rolled marginals.
    """
    tc = config.training
    manifest_data = load_manifest(data_dir)
    folds = manifest_data.get("folds")
    n_cases = len(manifest_data["cases"])
    if not folds or len(folds) != tc.n_folds:
        folds = cross_validation_split(n_cases, tc.n_folds, manifest_data["seed"], tc.n_val)
    if not 0 <= tc.fold < len(folds):
        raise ValueError(f"fold {tc.fold} outside [0, {len(folds)})")
    fold = folds[tc.fold]
    if tc.batch_size < 2 and config.constraints.enabled:
        raise ValueError("constraints need a batch size of at least 2")
    if tc.train_drf not in manifest_data["drfs"] and tc.train_drf != 1:
        raise MissingArtifactError(f"dataset has no DRF {tc.train_drf}")

    seeds = _seeds(tc.seed)
    slices = config.network.slices
    data = load_samples(data_dir, manifest_data, fold["train"], tc.train_drf, slices)
    pet_scale = float(np.mean(data.target))
    size = data.pet.shape[1:3]
    net = DeepKernelNet(config.network, seed=seeds["network"])
    dtype = net.dtype
    constraints = None
    optimisers = {}
    oc = config.optimiser
    opt = Adam(list(net.named_parameters()), base_lr=oc.base_lr, decay=oc.decay, decay_every=oc.decay_every)
    optimisers["net"] = opt
    if config.constraints.enabled:
        constraints = InfoConstraints(config.constraints, net, size[0], size[1], seeds["discriminators"])
        for name, mod in constraints.modules().items():
            optimisers[name] = Adam(list(mod.named_parameters()), base_lr=oc.disc_lr, decay=oc.decay, decay_every=oc.decay_every)
    disc_params = [p for m in (constraints.modules().values() if constraints else []) for p in m.parameters()]

    model = Model(net, pet_scale, config, constraints)
    run = RunManifest(
        config=config.to_dict(),
        seeds=seeds,
        fold={"index": tc.fold, **fold},
        pet_scale=pet_scale,
        train_drf=tc.train_drf,
    )
    rng = np.random.default_rng(seeds["data"])
    out_path = Path(out_dir) if out_dir else None
    if out_path:
        save_checkpoint(out_path, model, optimisers, run)

    pet_n = (data.pet / pet_scale).astype(dtype)
    tgt_n = (data.target / pet_scale).astype(dtype)
    t1 = data.t1.astype(dtype)
    t2 = data.t2.astype(dtype)
    cc = constraints.config if constraints else config.constraints
    n_batches = 0
    done = False
    for epoch in range(tc.epochs):
        order = rng.permutation(len(data))
        sums = np.zeros(4)
        count = 0
        for start in range(0, len(order), tc.batch_size):
            idx = order[start : start + tc.batch_size]
            if len(idx) < max(2, tc.batch_size // 2):
                continue
            xb, m1, m2, yb = pet_n[idx], t1[idx], t2[idx], tgt_n[idx]
            if tc.augment:
                flip = rng.random(len(idx)) < 0.5
                xb, m1, m2, yb = (np.where(flip[:, None, None, None], a[:, :, ::-1], a) for a in (xb, m1, m2, yb))
            net.train()
            opt.zero_grad()
            for p in disc_params:
                p.grad = None
            out, internals = net(xb, m1, m2)
            l_data = mse_loss(out, yb)
            total = l_data
            l_max_v = l_min_v = 0.0
            terms = None
            if constraints is not None:
                terms = constraints.terms(net, internals)
                if terms.l_max is not None:
                    total = total + terms.l_max * cc.gamma_max
                    l_max_v = float(terms.l_max.data)
                if terms.l_min is not None:
                    total = total + terms.l_min * cc.gamma_min
                    l_min_v = float(terms.l_min.data)
            if not np.isfinite(total.data):
                run.status = "aborted: non-finite loss"
                raise NumericalAbort(f"non-finite loss at batch {n_batches}")
            backward(total)
            for p in disc_params:
                p.grad = None
            clip_grad_norm(net.parameters(), oc.clip_norm)
            try:
                opt.step()
            except NumericalError as exc:
                run.status = f"aborted: {exc}"
                raise NumericalAbort(str(exc)) from exc
            if terms is not None and terms.max_joint is not None:
                discriminator_step(constraints.t_max, optimisers["t_max"], terms.max_joint, terms.max_marginal)
            if terms is not None and terms.min_joint is not None:
                discriminator_step(constraints.t_min, optimisers["t_min"], terms.min_joint, terms.min_marginal)
            ld = float(l_data.data)
            record = [ld, l_max_v, l_min_v, float(total.data)]
            run.batches.append(record)
            sums += record
            count += 1
            n_batches += 1
            if tc.max_batches is not None and n_batches >= tc.max_batches:
                done = True
                break
        if count:
            avg = sums / count
            entry = {"epoch": epoch, "batches": count, "l_data": avg[0], "l_max": avg[1], "l_min": avg[2], "l_total": avg[3]}
            run.epochs.append(entry)
            log.info("epoch %d: L_data=%.5f L_total=%.5f", epoch, avg[0], avg[3])
            if callback:
                callback(entry)
        if out_path:
            save_checkpoint(out_path, model, optimisers, run)
        if done:
            break

    if fold["val"]:
        rows = evaluate_model(model, data_dir, manifest_data, fold["val"], [tc.train_drf], tc.train_drf)
        run.validation = {
            "drf": tc.train_drf,
            "cases": fold["val"],
            "psnr": float(np.mean([r["psnr"] for r in rows])),
            "ssim": float(np.mean([r["ssim"] for r in rows])),
        }
    run.status = "complete"
    if out_path:
        save_checkpoint(out_path, model, optimisers, run)
    return run, model


# -- evaluation ---------------------------------------------------------------
CSV_FIELDS = ["case", "drf", "method", "in_distribution", "status", "psnr", "ssim", "psnr_standard"]


def _region_fields() -> list[str]:
    names = [r for r in REGIONS if r != "background"]
    return [f"bias_{r}" for r in names] + [f"var_{r}" for r in names]


def evaluate_model(
    model: Optional[Model],
    data_dir,
    manifest: dict,
    case_ids: Sequence[int],
    drfs: Sequence[int],
    train_drf: int,
    method: str = "model",
) -> list[dict]:
    """Metrics per (case, DRF). ``model=None`` scores the low-dose input itself."""
    slices = model.config.network.slices if model is not None else 3
    rows = []
    available = set(int(d) for d in manifest["drfs"])
    for ci in case_ids:
        entry = manifest["cases"][ci]
        case = load_case(data_dir, entry, [d for d in drfs if d in available])
        for drf in drfs:
            row = {"case": entry["id"], "drf": int(drf), "method": method, "in_distribution": int(drf) == int(train_drf)}
            if int(drf) not in case.low_dose:
                row["status"] = "skipped"
                rows.append(row)
                continue
            samples = slab_samples(case, int(drf), slices)
            if model is None:
                pred = samples.pet[..., slices // 2]
            else:
                pred = model.predict(samples)
            ref = samples.target[..., 0]
            labels = case.labels[samples.slice_index]
            report = regional_bias_variance(pred, ref, region_masks(labels, REGIONS))
            row.update(
                status="ok",
                psnr=float(psnr(pred, ref)),
                ssim=float(ssim(pred, ref)),
                psnr_standard=float(psnr_standard(pred, ref)),
            )
            for name in REGIONS[1:]:
                row[f"bias_{name}"] = float(report.bias.get(name, np.nan))
                row[f"var_{name}"] = float(report.variance.get(name, np.nan))
            rows.append(row)
    return rows


def rows_to_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CSV_FIELDS + _region_fields(), lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    return buf.getvalue()


def evaluate(
    checkpoint,
    data_dir,
    drf_list: Sequence[int],
    cases: Optional[Sequence[int]] = None,
    out_csv=None,
    with_input: bool = False,
) -> list[dict]:
    """Evaluate a saved checkpoint on the test split of its fold (or ``cases``)."""
    model, index = load_checkpoint(checkpoint)
    manifest = load_manifest(data_dir)
    case_ids = list(cases) if cases is not None else index["fold"]["test"]
    train_drf = int(index["train_drf"])
    rows = evaluate_model(model, data_dir, manifest, case_ids, drf_list, train_drf)
    if with_input:
        rows += evaluate_model(None, data_dir, manifest, case_ids, drf_list, train_drf, method="lowdose")
    if out_csv is not None:
        Path(out_csv).parent.mkdir(parents=True, exist_ok=True)
        with open(out_csv, "w", newline="") as fh:
            fh.write(rows_to_csv(rows))
    return rows


def summarise(rows: Sequence[dict], key: str = "psnr") -> dict[int, float]:
    """Mean of ``key`` per DRF over rows with status ``ok``."""
    out: dict[int, list[float]] = {}
    for r in rows:
        if r.get("status") == "ok":
            out.setdefault(r["drf"], []).append(r[key])
    return {d: float(np.mean(v)) for d, v in sorted(out.items())}


def clone_config(config: ExperimentConfig, **overrides) -> ExperimentConfig:
    """Deep copy with dotted-path overrides, e.g. ``{"network.patch_top": 8}``."""
    raw = copy.deepcopy(config.to_dict())
    for path, value in overrides.items():
        section, _, key = path.partition(".")
        raw[section][key] = value
    if "network.patch_top" in overrides and "network.patch_sizes" not in overrides:
        raw["network"]["patch_sizes"] = None
        if "network.strides" not in overrides:
            raw["network"]["strides"] = None
    return ExperimentConfig.from_dict(raw)
