"""Linear surrogate of squared bus voltages.

Features are the per-bus net withdrawals (kW and kvar).  Device powers are
affine in the normalised actions on each battery sign branch, so for a fixed
observation the prediction is an exactly affine map of the joint action.  That
map, ``v_hat = A @ a + b``, is what the safety projection consumes.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .der import FleetSpec
from .grid import InjectionProfile, NetworkModel, PowerFlowError, solve_power_flow

log = logging.getLogger(__name__)

FORMAT = "safeflex-linear-voltage"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class FeatureSpec:
    n_bus: int
    intercept: bool = True

    @property
    def names(self) -> list[str]:
        return [f"p_kw_{i}" for i in range(self.n_bus)] + [f"q_kvar_{i}" for i in range(self.n_bus)]

    @property
    def n_features(self) -> int:
        return 2 * self.n_bus

    def p_col(self, bus: int) -> int:
        return bus

    def q_col(self, bus: int) -> int:
        return self.n_bus + bus

    def encode(self, inj: InjectionProfile) -> np.ndarray:
        return np.concatenate([inj.active_kw, inj.reactive_kvar], axis=-1)


@dataclass
class RegressionDataset:
    features: np.ndarray
    targets: np.ndarray
    spec: FeatureSpec
    seed: int | None = None

    def __post_init__(self):
        if self.features.shape[0] != self.targets.shape[0]:
            raise ValueError("feature and target row counts differ")
        if self.features.shape[1] != self.spec.n_features:
            raise ValueError("feature width does not match the feature spec")

    def __len__(self) -> int:
        return self.features.shape[0]

    def subset(self, idx) -> RegressionDataset:
        return RegressionDataset(self.features[idx], self.targets[idx], self.spec, self.seed)


@dataclass
class LinearVoltageModel:
    """``v_hat = ((x - mean) / scale)[kept] @ weights + intercept``."""

    spec: FeatureSpec
    weights: np.ndarray  # (n_kept, n_outputs), on standardised features
    intercept: np.ndarray
    mean: np.ndarray
    scale: np.ndarray
    kept: np.ndarray  # boolean mask over features; constant columns are dropped
    metadata: dict = field(default_factory=dict)

    @property
    def coef(self) -> np.ndarray:
        """Raw-unit sensitivities, shape ``(n_outputs, n_features)``."""
        out = np.zeros((self.weights.shape[1], self.spec.n_features))
        out[:, self.kept] = (self.weights / self.scale[self.kept, None]).T
        return out

    @property
    def raw_intercept(self) -> np.ndarray:
        return self.intercept - self.coef @ self.mean

    def predict_features(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.spec.n_features:
            raise ValueError(f"expected {self.spec.n_features} features, got {x.shape[-1]}")
        z = (x - self.mean) / self.scale
        return z[..., self.kept] @ self.weights + self.intercept

    def predict(self, base: InjectionProfile, joint_action, fleet: FleetSpec) -> np.ndarray:
        """Predicted squared voltages for ``base`` withdrawals plus the joint action."""
        a = np.asarray(joint_action, dtype=float).ravel()
        signs = np.where(a[1::2] < 0, -1, 1)
        A, b = action_affine_map(self, base, fleet, signs)
        return A @ a + b

    def to_dict(self) -> dict:
        return {
            "format": FORMAT,
            "version": FORMAT_VERSION,
            "features": self.spec.names,
            "n_bus": self.spec.n_bus,
            "intercept_flag": self.spec.intercept,
            "weights": self.weights.tolist(),
            "intercept": self.intercept.tolist(),
            "mean": self.mean.tolist(),
            "scale": self.scale.tolist(),
            "kept": self.kept.astype(int).tolist(),
            "metadata": self.metadata,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> LinearVoltageModel:
        if doc.get("format") != FORMAT:
            raise ValueError("not a linear voltage model file")
        if doc.get("version") != FORMAT_VERSION:
            raise ValueError(f"unsupported model version {doc.get('version')}")
        spec = FeatureSpec(int(doc["n_bus"]), bool(doc["intercept_flag"]))
        if doc["features"] != spec.names:
            raise ValueError("feature order in file does not match this version")
        kept = np.array(doc["kept"], dtype=bool)
        return cls(
            spec=spec,
            weights=np.array(doc["weights"], dtype=float).reshape(int(kept.sum()), -1),
            intercept=np.array(doc["intercept"], dtype=float),
            mean=np.array(doc["mean"], dtype=float),
            scale=np.array(doc["scale"], dtype=float),
            kept=kept,
            metadata=dict(doc.get("metadata", {})),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path: str | Path) -> LinearVoltageModel:
        return cls.from_dict(json.loads(Path(path).read_text()))


def action_affine_map(
    model: LinearVoltageModel, base: InjectionProfile, fleet: FleetSpec, ess_signs
) -> tuple[np.ndarray, np.ndarray]:
    """``(A, b)`` with ``v_hat = A @ a + b`` for actions on the given battery sign branches.

    ``a`` is ordered ``[dr_0, ess_0, dr_1, ess_1, ...]``.  On the charge branch
    the withdrawal grows by ``alpha * p_ch_max``; on the discharge branch it
    shrinks by ``|alpha| * p_dis_max`` which is again ``alpha * p_dis_max``.
    """
    coef = model.coef
    b = model.predict_features(model.spec.encode(base))
    A = np.zeros((coef.shape[0], 2 * len(fleet)))
    for k, agent in enumerate(fleet.agents):
        col = coef[:, model.spec.p_col(agent.bus)]
        A[:, 2 * k] = -agent.building.p_dr_max_kw * col
        rated = agent.ess.p_ch_max_kw if ess_signs[k] >= 0 else agent.ess.p_dis_max_kw
        A[:, 2 * k + 1] = rated * col
    return A, b


def _solve_rows(net: NetworkModel, p: np.ndarray, q: np.ndarray, chunk: int = 1000) -> tuple[np.ndarray, np.ndarray]:
    """Solve many scenarios; drop (and log) those whose power flow fails."""
    targets, ok = [], []
    for lo in range(0, p.shape[0], chunk):
        sl = slice(lo, lo + chunk)
        try:
            targets.append(solve_power_flow(net, InjectionProfile(p[sl], q[sl])).v_sq_pu)
            ok.append(np.ones(targets[-1].shape[0], dtype=bool))
        except PowerFlowError:
            rows, flags = [], []
            for i in range(*sl.indices(p.shape[0])):
                try:
                    rows.append(solve_power_flow(net, InjectionProfile(p[i], q[i])).v_sq_pu)
                    flags.append(True)
                except PowerFlowError as exc:
                    log.warning("scenario %d dropped: %s", i, exc)
                    rows.append(np.full(net.n_bus, np.nan))
                    flags.append(False)
            targets.append(np.array(rows))
            ok.append(np.array(flags))
    return np.concatenate(targets), np.concatenate(ok)


def generate_dataset(
    net: NetworkModel,
    fleet: FleetSpec,
    active_kw: np.ndarray,
    reactive_kvar: np.ndarray,
    n_scenarios: int,
    seed: int,
    perturbation: tuple[float, float] = (0.6, 1.4),
) -> RegressionDataset:
    """Random operating points around the given load rows, labelled by exact power flow.

    Each scenario picks a row, scales every bus load by an independent uniform
    factor and applies a random joint action within the power ratings.
    """
    spec = FeatureSpec(net.n_bus)
    if n_scenarios < 1:
        raise ValueError("n_scenarios must be positive")
    rng = np.random.default_rng(seed)
    rows = rng.integers(0, active_kw.shape[0], size=n_scenarios)
    factor = rng.uniform(*perturbation, size=(n_scenarios, net.n_bus))
    p = active_kw[rows] * factor
    q = reactive_kvar[rows] * factor
    n_ag = len(fleet)
    alpha_dr = rng.uniform(0.0, 1.0, size=(n_scenarios, n_ag))
    alpha_ess = rng.uniform(-1.0, 1.0, size=(n_scenarios, n_ag))
    for k, agent in enumerate(fleet.agents):
        rated = np.where(alpha_ess[:, k] >= 0, agent.ess.p_ch_max_kw, agent.ess.p_dis_max_kw)
        p[:, agent.bus] += -alpha_dr[:, k] * agent.building.p_dr_max_kw + alpha_ess[:, k] * rated
    targets, ok = _solve_rows(net, p, q)
    if not ok.all():
        log.warning("%d of %d scenarios dropped", int((~ok).sum()), n_scenarios)
    x = spec.encode(InjectionProfile(p, q))
    return RegressionDataset(x[ok], targets[ok], spec, seed)


def fit(dataset: RegressionDataset, ridge_lambda: float = 1e-6) -> LinearVoltageModel:
    """Ridge least squares for every output at once, via a QR factorisation.

    Features are standardised; the penalty is ``ridge_lambda * n_rows`` so that
    duplicating every row leaves the solution unchanged.  The intercept is not
    penalised.
    """
    if ridge_lambda < 0:
        raise ValueError("ridge_lambda must be non-negative")
    x, y = dataset.features, dataset.targets
    n = x.shape[0]
    if n == 0:
        raise ValueError("empty dataset")
    mean = x.mean(axis=0)
    scale = x.std(axis=0)
    kept = scale > 1e-12 * np.maximum(1.0, np.abs(mean))
    scale = np.where(kept, scale, 1.0)
    z = ((x - mean) / scale)[:, kept]
    if dataset.spec.intercept:
        y_mean = y.mean(axis=0)
    else:
        y_mean = np.zeros(y.shape[1])
        z = x[:, kept] / scale[kept]
        mean = np.zeros_like(mean)
    yc = y - y_mean
    m = z.shape[1]
    if ridge_lambda > 0:
        z_aug = np.vstack([z, np.sqrt(ridge_lambda * n) * np.eye(m)])
        y_aug = np.vstack([yc, np.zeros((m, y.shape[1]))])
    else:
        z_aug, y_aug = z, yc
    if z_aug.shape[0] < m:
        raise np.linalg.LinAlgError("fewer rows than features and no ridge penalty")
    qm, r = np.linalg.qr(z_aug)
    diag = np.abs(np.diag(r))
    if diag.min(initial=np.inf) <= 1e-10 * max(diag.max(initial=0.0), 1.0):
        raise np.linalg.LinAlgError("singular design matrix; use ridge_lambda > 0")
    w = np.linalg.solve(r, qm.T @ y_aug) if m else np.zeros((0, y.shape[1]))
    return LinearVoltageModel(
        spec=dataset.spec,
        weights=w,
        intercept=y_mean,
        mean=mean,
        scale=scale,
        kept=kept,
        metadata={"ridge_lambda": ridge_lambda, "n_rows": int(n), "seed": dataset.seed},
    )


@dataclass
class CrossValidationReport:
    mae_pu: list[float]
    r2: list[float]
    max_abs_error_pu: list[float]
    degenerate_outputs: list[int]

    @property
    def mae_mean(self) -> float:
        return float(np.mean(self.mae_pu))

    @property
    def mae_sd(self) -> float:
        return float(np.std(self.mae_pu))

    @property
    def r2_mean(self) -> float:
        return float(np.nanmean(self.r2)) if not np.all(np.isnan(self.r2)) else float("nan")

    @property
    def r2_sd(self) -> float:
        return float(np.nanstd(self.r2)) if not np.all(np.isnan(self.r2)) else float("nan")

    def to_dict(self) -> dict:
        return {
            "mae_pu": self.mae_pu,
            "r2": self.r2,
            "max_abs_error_pu": self.max_abs_error_pu,
            "mae_mean": self.mae_mean,
            "mae_sd": self.mae_sd,
            "r2_mean": self.r2_mean,
            "r2_sd": self.r2_sd,
            "degenerate_outputs": self.degenerate_outputs,
        }


def r2_scores(y_true: np.ndarray, y_pred: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-output coefficient of determination; zero-variance outputs give NaN and are flagged."""
    ss_res = ((y_true - y_pred) ** 2).sum(axis=0)
    ss_tot = ((y_true - y_true.mean(axis=0)) ** 2).sum(axis=0)
    degenerate = ss_tot <= 1e-14 * max(1.0, float(np.abs(y_true).max(initial=0.0))) ** 2
    with np.errstate(divide="ignore", invalid="ignore"):
        r2 = np.where(degenerate, np.nan, 1.0 - ss_res / np.where(degenerate, 1.0, ss_tot))
    return r2, degenerate


def cross_validate(dataset: RegressionDataset, k: int = 5, seed: int = 0, ridge_lambda: float = 1e-6) -> CrossValidationReport:
    """k-fold CV.  MAE is on voltage magnitude (pu), R^2 on squared voltage averaged over outputs."""
    n = len(dataset)
    if k < 2:
        raise ValueError("k must be at least 2")
    if k > n:
        raise ValueError(f"k = {k} exceeds the {n} rows")
    perm = np.random.default_rng(seed).permutation(n)
    folds = np.array_split(perm, k)
    maes, r2s, maxes = [], [], []
    degenerate_any = np.zeros(dataset.targets.shape[1], dtype=bool)
    for i, test in enumerate(folds):
        train = np.concatenate([f for j, f in enumerate(folds) if j != i])
        model = fit(dataset.subset(train), ridge_lambda)
        pred = model.predict_features(dataset.features[test])
        true = dataset.targets[test]
        err = np.abs(np.sqrt(np.clip(pred, 0, None)) - np.sqrt(true))
        maes.append(float(err.mean()))
        maxes.append(float(err.max()))
        r2, deg = r2_scores(true, pred)
        degenerate_any |= deg
        r2s.append(float(np.nanmean(r2)) if not np.all(deg) else float("nan"))
    return CrossValidationReport(maes, r2s, maxes, [int(i) for i in np.nonzero(degenerate_any)[0]])
