"""Draft-length controllers.

Decide, token by token, whether the draft model keeps generating: a fixed-K
baseline, Thompson sampling over a Beta posterior for the per-token
acceptance probability, and a calibrated variant that blends a learned
per-step agreement predictor with the running observed acceptance mean.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import Rng
from . import nanolm

ACCOUNTING_MODES = ("literal", "exact")
MAX_POSITION_MATRICES = 10


@dataclass(frozen=True)
class ControllerDecision:
    continue_drafting: bool
    theta_sampled: float | None = None

    def __post_init__(self):
        if self.theta_sampled is not None and not 0.0 <= self.theta_sampled <= 1.0:
            raise ValueError("theta_sampled must lie in [0, 1]")


@dataclass(frozen=True)
class BetaState:
    alpha: float = 1.0
    beta: float = 1.0

    def __post_init__(self):
        if not (self.alpha > 0 and math.isfinite(self.alpha)):
            raise ValueError("alpha must be finite and > 0")
        if not (self.beta > 0 and math.isfinite(self.beta)):
            raise ValueError("beta must be finite and > 0")

    def mean(self) -> float:
        return self.alpha / (self.alpha + self.beta)

    def variance(self) -> float:
        s = self.alpha + self.beta
        return self.alpha * self.beta / (s * s * (s + 1.0))


@dataclass(frozen=True)
class CaliState:
    theta_hat: float = 0.5
    n: int = 0
    sigma_m: float = 0.2
    sigma_s: float = 0.5
    t: int = 0

    def __post_init__(self):
        if not 0.0 <= self.theta_hat <= 1.0:
            raise ValueError("theta_hat must lie in [0, 1]")
        if self.n < 0 or self.t < 0:
            raise ValueError("counts must be >= 0")
        if self.sigma_m <= 0 or self.sigma_s <= 0:
            raise ValueError("sigma_m and sigma_s must be positive")


def fixed_k_decide(k: int, drafted_so_far: int) -> ControllerDecision:
    """Keep drafting until k tokens have been proposed this round."""
    if k < 1:
        raise ValueError("k must be >= 1")
    return ControllerDecision(continue_drafting=drafted_so_far < k)


def beta_sample(state: BetaState, rng: Rng) -> ControllerDecision:
    """Draw theta from the Beta posterior, then a continue/stop coin from it."""
    theta = rng.beta(state.alpha, state.beta)
    return ControllerDecision(continue_drafting=rng.bernoulli(theta), theta_sampled=theta)


def beta_posterior(state: BetaState, r: int, n: int) -> BetaState:
    """Exact conjugate update for r successes in n Bernoulli trials."""
    if not 0 <= r <= n:
        raise ValueError("need 0 <= r <= n")
    return BetaState(alpha=state.alpha + r, beta=state.beta + (n - r))


def round_trial_counts(accepted_drafts: int, drafted: int, mode: str = "literal") -> tuple[int, int]:
    """Map one round's verification outcome to (successes, trials).

    ``literal`` books r = |Q_v| - 1 (floored at zero) and
    n = min(|Q_v| + 1, |Q_d|) with |Q_v| read as the accepted-draft count.
    ``exact`` counts each verified draft token as one trial: r = q,
    n = q plus one failure when a token was rejected.
    """
    if drafted < 1:
        raise ValueError("drafted must be >= 1")
    if not 0 <= accepted_drafts <= drafted:
        raise ValueError("accepted_drafts out of range")
    q = accepted_drafts
    if mode == "literal":
        r = max(q - 1, 0)
        n = min(q + 1, drafted)
    elif mode == "exact":
        r = q
        n = q + (1 if q < drafted else 0)
    else:
        raise ValueError(f"unknown accounting mode {mode!r}")
    return r, n


def beta_update(
    state: BetaState, accepted_drafts: int, drafted: int, mode: str = "literal"
) -> BetaState:
    r, n = round_trial_counts(accepted_drafts, drafted, mode)
    return beta_posterior(state, r, n)


@dataclass
class PredictorWeights:
    """Per-position transforms of the target hidden state plus a two-logit
    mixing map over (transformed target hidden, draft hidden)."""

    position: np.ndarray  # (MAX_POSITION_MATRICES, d, d)
    mixing: np.ndarray  # (2, 2d)

    def __post_init__(self):
        if self.position.ndim != 3 or self.position.shape[0] != MAX_POSITION_MATRICES:
            raise ValueError("position matrices must have shape (10, d, d)")
        d = self.position.shape[1]
        if self.position.shape[2] != d or self.mixing.shape != (2, 2 * d):
            raise ValueError("mixing map must have shape (2, 2*d)")

    @property
    def d_model(self) -> int:
        return self.position.shape[1]

    @classmethod
    def zeros(cls, d_model: int) -> "PredictorWeights":
        return cls(
            position=np.zeros((MAX_POSITION_MATRICES, d_model, d_model), dtype=np.float32),
            mixing=np.zeros((2, 2 * d_model), dtype=np.float32),
        )

    @classmethod
    def init_random(cls, d_model: int, rng: Rng, scale: float = 0.05) -> "PredictorWeights":
        return cls(
            position=(rng.standard_normal((MAX_POSITION_MATRICES, d_model, d_model)) * scale).astype(
                np.float32
            ),
            mixing=(rng.standard_normal((2, 2 * d_model)) * scale).astype(np.float32),
        )

    def copy(self) -> "PredictorWeights":
        return PredictorWeights(self.position.copy(), self.mixing.copy())

    def save(self, path) -> None:
        tensors = {"Wp": self.mixing}
        for i in range(MAX_POSITION_MATRICES):
            tensors[f"Wi.{i + 1}"] = self.position[i]
        nanolm.write_container(path, {"kind": "predictor", "d_model": self.d_model}, tensors)

    @classmethod
    def load(cls, path) -> "PredictorWeights":
        config, tensors = nanolm.read_container(path)
        if config.get("kind") != "predictor":
            raise nanolm.CheckpointError("not a predictor checkpoint")
        d = int(config["d_model"])
        position = np.stack(
            [tensors[f"Wi.{i + 1}"] for i in range(MAX_POSITION_MATRICES)], axis=0
        )
        return cls(position=position.astype(np.float32), mixing=tensors["Wp"].astype(np.float32))


def predictor_score(
    pred: PredictorWeights, target_hidden: np.ndarray, draft_hidden: np.ndarray, i: int
) -> float:
    """Raw two-logit margin before the sigmoid; position index clamps at 10."""
    if i < 1:
        raise ValueError("position index i must be >= 1")
    d = pred.d_model
    if target_hidden.shape != (d,) or draft_hidden.shape != (d,):
        raise ValueError("hidden state dimension mismatch")
    w = pred.position[min(i, MAX_POSITION_MATRICES) - 1]
    feature = np.concatenate([w @ target_hidden, draft_hidden])
    logits = pred.mixing @ feature
    return float(logits[1] - logits[0])


def cali_predict(
    pred: PredictorWeights, target_hidden: np.ndarray, draft_hidden: np.ndarray, i: int
) -> float:
    """Model-predicted agreement probability for draft position i."""
    score = predictor_score(pred, target_hidden, draft_hidden, i)
    return float(1.0 / (1.0 + np.exp(-score)))


def cali_mu_sigma(state: CaliState, theta_m: float) -> tuple[float, float]:
    """Posterior mean and variance blending the model prediction with the
    observed acceptance mean, weighted by the verification count."""
    sm2 = state.sigma_m**2
    ss2 = state.sigma_s**2
    denom = state.n * sm2 + ss2
    mu = (ss2 / denom) * theta_m + (state.n * sm2 / denom) * state.theta_hat
    sigma2 = sm2 * ss2 / denom
    return mu, sigma2


def cali_sample(state: CaliState, theta_m: float, rng: Rng) -> ControllerDecision:
    if not 0.0 < theta_m < 1.0:
        raise ValueError("theta_m must lie in (0, 1)")
    mu, sigma2 = cali_mu_sigma(state, theta_m)
    theta = rng.normal(mu, math.sqrt(sigma2))
    theta = min(max(theta, 0.0), 1.0)
    return ControllerDecision(continue_drafting=rng.bernoulli(theta), theta_sampled=theta)


def cali_update(state: CaliState, accepted_total: int) -> CaliState:
    """Fold one round's accepted token count |Q_v| into the running mean and
    bump the verification count."""
    if accepted_total < 1:
        raise ValueError("accepted_total must be >= 1")
    qv = int(accepted_total)
    t_new = state.t + qv
    theta_new = (state.theta_hat * (t_new - qv + 1) + qv) / (t_new + 1)
    return CaliState(
        theta_hat=theta_new,
        n=state.n + 1,
        sigma_m=state.sigma_m,
        sigma_s=state.sigma_s,
        t=t_new,
    )


# --- engine-facing controller objects ----------------------------------------


class FixedKController:
    """Always draft exactly k tokens per round."""

    name = "fixed"

    def __init__(self, k: int):
        if k < 1:
            raise ValueError("k must be >= 1")
        self.k = k

    def start_round(self, target_hidden) -> None:
        pass

    def decide(self, drafted_so_far: int, draft_hidden, rng: Rng) -> ControllerDecision:
        return fixed_k_decide(self.k, drafted_so_far)

    def observe(self, accepted_drafts: int, drafted: int) -> None:
        pass


class BetaTSController:
    """Thompson sampling over a Beta posterior for the acceptance rate."""

    name = "beta"

    def __init__(self, alpha0: float = 1.0, beta0: float = 1.0, mode: str = "literal"):
        if mode not in ACCOUNTING_MODES:
            raise ValueError(f"unknown accounting mode {mode!r}")
        self.state = BetaState(alpha0, beta0)
        self.mode = mode

    def start_round(self, target_hidden) -> None:
        pass

    def decide(self, drafted_so_far: int, draft_hidden, rng: Rng) -> ControllerDecision:
        return beta_sample(self.state, rng)

    def observe(self, accepted_drafts: int, drafted: int) -> None:
        self.state = beta_update(self.state, accepted_drafts, drafted, self.mode)


class CaliTSController:
    """Calibrated Thompson sampling: Gaussian posterior around a blend of the
    predictor's score and the observed acceptance mean.

    ``model_only`` drops the sampling-prediction blend and acts directly on
    the predictor's probability (the bench ablation toggle); the running
    mean keeps updating so the toggle changes only the decision rule.
    """

    name = "cali"

    def __init__(
        self,
        predictor: PredictorWeights,
        sigma_m: float = 0.2,
        sigma_s: float = 0.5,
        theta0: float = 0.5,
        model_only: bool = False,
    ):
        self.predictor = predictor
        self.state = CaliState(theta_hat=theta0, sigma_m=sigma_m, sigma_s=sigma_s)
        self.model_only = model_only
        self._target_hidden: np.ndarray | None = None

    def start_round(self, target_hidden) -> None:
        self._target_hidden = np.asarray(target_hidden, dtype=np.float32)

    def decide(self, drafted_so_far: int, draft_hidden, rng: Rng) -> ControllerDecision:
        if self._target_hidden is None:
            raise RuntimeError("start_round must run before decide")
        theta_m = cali_predict(
            self.predictor,
            self._target_hidden,
            np.asarray(draft_hidden, dtype=np.float32),
            drafted_so_far,
        )
        theta_m = min(max(theta_m, 1e-7), 1.0 - 1e-7)
        if self.model_only:
            return ControllerDecision(
                continue_drafting=rng.bernoulli(theta_m), theta_sampled=theta_m
            )
        return cali_sample(self.state, theta_m, rng)

    def observe(self, accepted_drafts: int, drafted: int) -> None:
        # |Q_v| counts the accepted prefix plus the target's bonus token, so
        # every verified round contributes at least one observation.
        self.state = cali_update(self.state, accepted_drafts + 1)
