"""KPI-combination distributions, entropy, ambiguity classes and agreement statistics."""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction
from typing import Any, Iterable, Mapping, Sequence

from .errors import EmptyInput, EmptyMatrix, InvalidDistribution, LengthMismatch
from .kpi import KpiVector

_TOL = 1e-9


@dataclass(frozen=True, order=True)
class KpiCombination:
    """A KPI vector quantized to display precision (RU to 0.1%, CS to 0.1M yen)."""

    nc: int
    hc: int
    ru: float
    hi: int
    cs_millions: float

    @classmethod
    def of(cls, v: KpiVector) -> "KpiCombination":
        return cls(v.nc, v.hc, v.ru_display, v.hi, v.cs_millions)

    @property
    def key(self) -> tuple:
        return (self.nc, self.hc, self.ru, self.hi, self.cs_millions)

    @property
    def is_failure(self) -> bool:
        return not any(self.key)

    def label(self) -> str:
        return f"NC={self.nc}, HC={self.hc}, RU={self.ru:.1f}%, HI={self.hi}, CS=¥{self.cs_millions:.1f}M"

    def to_dict(self) -> dict[str, Any]:
        return {"NC": self.nc, "HC": self.hc, "RU": self.ru, "HI": self.hi, "CS_millions": self.cs_millions}


def normalized_entropy(frequencies: Sequence[float]) -> float:
    """Shannon entropy (natural log) divided by ln K; 0 when K = 1."""
    p = [float(x) for x in frequencies]
    if not p:
        raise InvalidDistribution("empty distribution")
    if any(not x > 0 for x in p):
        raise InvalidDistribution("every frequency must be strictly positive")
    if abs(math.fsum(p) - 1.0) > 1e-6:
        raise InvalidDistribution(f"frequencies sum to {sum(p)}, not 1")
    k = len(p)
    if k == 1:
        return 0.0
    h = -math.fsum(x * math.log(x) for x in p) / math.log(k)
    return min(1.0, max(0.0, h))


def perplexity(entropy_norm: float, k: int) -> float:
    """exp(H_norm * ln K), i.e. the effective number of clusters."""
    if k < 1:
        raise ValueError("K must be >= 1")
    if not 0.0 <= entropy_norm <= 1.0 + _TOL:
        raise ValueError("entropy_norm must lie in [0, 1]")
    return math.exp(entropy_norm * math.log(k))


@dataclass(frozen=True)
class DistributionReport:
    counts: Mapping[KpiCombination, int]
    M: int
    K: int
    entropy_norm: float
    perplexity: float

    @property
    def ranked(self) -> list[tuple[KpiCombination, int]]:
        """Combinations by descending count, ties broken by key order."""
        return sorted(self.counts.items(), key=lambda kv: (-kv[1], kv[0].key))

    @property
    def frequencies(self) -> list[float]:
        return [c / self.M for _, c in self.ranked]

    def frequency(self, combo: KpiCombination) -> float:
        return self.counts.get(combo, 0) / self.M

    @property
    def failure_frequency(self) -> float:
        return sum(c for k, c in self.counts.items() if k.is_failure) / self.M

    def to_dict(self) -> dict[str, Any]:
        return {
            "M": self.M,
            "K": self.K,
            "entropy_norm": round(self.entropy_norm, 12),
            "entropy_norm_pct": round(self.entropy_norm * 100, 1),
            "perplexity": round(self.perplexity, 12),
            "combinations": [
                {"kpis": combo.to_dict(), "count": n, "frequency": n / self.M, "failure": combo.is_failure}
                for combo, n in self.ranked
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, ensure_ascii=False)

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "DistributionReport":
        counts = {}
        for row in d["combinations"]:
            k = row["kpis"]
            counts[KpiCombination(k["NC"], k["HC"], k["RU"], k["HI"], k["CS_millions"])] = row["count"]
        return cls(counts, d["M"], d["K"], d["entropy_norm"], d["perplexity"])

    def to_table(self, top: int = 5) -> str:
        lines = [
            f"M={self.M}  K={self.K}  normalized entropy={self.entropy_norm * 100:.1f}%  "
            f"perplexity={self.perplexity:.2f}",
            f"{'rank':>4}  {'freq':>6}  {'count':>5}  combination",
        ]
        for i, (combo, n) in enumerate(self.ranked[:top], start=1):
            tag = "  (generation failure)" if combo.is_failure else ""
            lines.append(f"{i:>4}  {n / self.M * 100:5.1f}%  {n:>5}  {combo.label()}{tag}")
        return "\n".join(lines) + "\n"


def tabulate(vectors: Iterable[KpiVector]) -> DistributionReport:
    counts = Counter(KpiCombination.of(v) for v in vectors)
    m = sum(counts.values())
    if m == 0:
        raise EmptyInput("no KPI vectors to tabulate")
    freqs = [c / m for c in counts.values()]
    h = normalized_entropy(freqs)
    return DistributionReport(dict(counts), m, len(counts), h, perplexity(h, len(counts)))


class AmbiguityClass(str, Enum):
    UNAMBIGUOUS = "Unambiguous"
    NOISE_CONTAMINATED = "NoiseContaminated"
    GENUINELY_VAGUE = "GenuinelyVague"
    MIXED = "Mixed"


@dataclass(frozen=True)
class AmbiguityVerdict:
    cls: AmbiguityClass
    dominant_frequency: float
    failure_frequency: float
    comparable_clusters: int

    def to_dict(self) -> dict[str, Any]:
        return {"class": self.cls.value, "dominant_frequency": self.dominant_frequency,
                "failure_frequency": self.failure_frequency, "comparable_clusters": self.comparable_clusters}


def classify_ambiguity(report: DistributionReport, dominance: float = 0.6,
                       comparable: float = 0.1) -> AmbiguityVerdict:
    """Separate noise (one dominant mode plus failures) from vagueness (several comparable modes)."""
    fail = report.failure_frequency
    modes = sorted((n / report.M for k, n in report.counts.items() if not k.is_failure), reverse=True)
    dominant = modes[0] if modes else 0.0
    n_comparable = sum(1 for f in modes if f >= comparable)
    if report.K == 1:
        cls = AmbiguityClass.UNAMBIGUOUS
    elif dominant >= dominance and n_comparable == 1:
        cls = AmbiguityClass.NOISE_CONTAMINATED
    elif n_comparable >= 2:
        cls = AmbiguityClass.GENUINELY_VAGUE
    else:
        cls = AmbiguityClass.MIXED
    return AmbiguityVerdict(cls, dominant, fail, n_comparable)


# --- agreement --------------------------------------------------------------


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def n(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def to_dict(self) -> dict[str, int]:
        return {"tp": self.tp, "fp": self.fp, "fn": self.fn, "tn": self.tn}


def confusion(gt_decisions: Sequence[bool], gen_decisions: Sequence[bool]) -> ConfusionMatrix:
    if len(gt_decisions) != len(gen_decisions):
        raise LengthMismatch(f"{len(gt_decisions)} ground-truth vs {len(gen_decisions)} generated decisions")
    c = Counter((bool(g), bool(p)) for g, p in zip(gt_decisions, gen_decisions))
    return ConfusionMatrix(c[(True, True)], c[(False, True)], c[(True, False)], c[(False, False)])


def _ratio(num: int, den: int) -> Fraction | None:
    return Fraction(num, den) if den else None


@dataclass(frozen=True)
class AgreementReport:
    """Per-patient agreement; ``None`` marks a metric that is undefined (n/a)."""

    n: int
    agreement: float
    f1: float | None
    recall: float | None
    specificity: float | None
    balanced_accuracy: float | None
    kappa: float | None
    incomplete: bool = False
    # the same metrics as exact rationals; not serialized
    exact: Mapping[str, Fraction | None] = field(default_factory=dict, compare=False, repr=False)

    def to_dict(self) -> dict[str, Any]:
        return {"n": self.n, "agreement": self.agreement, "f1": self.f1, "recall": self.recall,
                "specificity": self.specificity, "balanced_accuracy": self.balanced_accuracy,
                "kappa": self.kappa, "incomplete": self.incomplete}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "AgreementReport":
        return cls(d["n"], d["agreement"], d["f1"], d["recall"], d["specificity"],
                   d["balanced_accuracy"], d["kappa"], d.get("incomplete", False))


def agreement_metrics(cm: ConfusionMatrix, incomplete: bool = False) -> AgreementReport:
    """Exact rational arithmetic, converted to float at the end."""
    n = cm.n
    if n == 0:
        raise EmptyMatrix("confusion matrix is empty")
    p_o = Fraction(cm.tp + cm.tn, n)
    recall = _ratio(cm.tp, cm.tp + cm.fn)
    spec = _ratio(cm.tn, cm.tn + cm.fp)
    f1 = _ratio(2 * cm.tp, 2 * cm.tp + cm.fp + cm.fn)
    bal = (recall + spec) / 2 if recall is not None and spec is not None else None
    p_e = Fraction((cm.tp + cm.fp) * (cm.tp + cm.fn) + (cm.fn + cm.tn) * (cm.fp + cm.tn), n * n)
    kappa = (p_o - p_e) / (1 - p_e) if p_e != 1 else None

    def f(x: Fraction | None) -> float | None:
        return None if x is None else float(x)

    exact = {"agreement": p_o, "f1": f1, "recall": recall, "specificity": spec,
             "balanced_accuracy": bal, "kappa": kappa}
    return AgreementReport(n, float(p_o), f(f1), f(recall), f(spec), f(bal), f(kappa), incomplete, exact)


def mean_agreement(reports: Sequence[AgreementReport]) -> dict[str, float | None]:
    """Mean of each metric over the reports where it is defined."""
    out: dict[str, float | None] = {}
    for name in ("agreement", "f1", "recall", "specificity", "balanced_accuracy", "kappa"):
        vals = [getattr(r, name) for r in reports if getattr(r, name) is not None]
        out[name] = sum(vals) / len(vals) if vals else None
    return out


def _pct(x: float | None) -> str:
    return "n/a" if x is None else f"{x * 100:.1f}"


def agreement_table(rows: Sequence[tuple[str, AgreementReport]]) -> str:
    """Plain-text table with columns N, Agr.%, F1%, Rec.%, Bal.Acc.%, kappa."""
    header = f"{'model':<16}{'N':>6}{'Agr.%':>8}{'F1%':>8}{'Rec.%':>8}{'Bal.Acc.%':>11}{'κ':>8}"
    lines = [header]
    for name, r in rows:
        kappa = "n/a" if r.kappa is None else f"{r.kappa:.3f}"
        flag = " *" if r.incomplete else ""
        lines.append(f"{name:<16}{r.n:>6}{_pct(r.agreement):>8}{_pct(r.f1):>8}{_pct(r.recall):>8}"
                     f"{_pct(r.balanced_accuracy):>11}{kappa:>8}{flag}")
    if any(r.incomplete for _, r in rows):
        lines.append("* incomplete: some records failed to execute and were excluded")
    return "\n".join(lines) + "\n"
