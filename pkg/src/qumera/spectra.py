"""Critical exponents from the channel spectrum.

Each eigenvalue modulus below the leading unit eigenvalue encodes a decay
exponent through nu = -2 log2 |kappa|; the leading eigenvalue itself is the
trace-preservation eigenvalue and carries no exponent.  Moduli are clustered
into degeneracy groups and greedily matched against exact references, with
anything unmatched below the largest matched exponent reported as spurious.
"""

import json
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "SpectraError",
    "SpectrumReport",
    "MatchReport",
    "exponents_from_spectrum",
    "match_report",
    "report_as_dict",
]

LEADING_TOL = 1e-6
CLUSTER_TOL = 1e-3


class SpectraError(ValueError):
    pass


@dataclass
class MatchReport:
    matches: list    # dicts: label, nu_exact, nu_computed, abs_err, rank, within_tol
    spurious: list   # dicts: rank, nu, modulus
    metrics: dict


@dataclass
class SpectrumReport:
    eigenvalues: np.ndarray        # modulus-descending complex
    exponents: list                # (rank, nu) for ranks >= 2; ranks are 1-based
    groups: list                   # clusters of ranks with close moduli
    cluster_tol: float
    comparison: MatchReport | None = field(default=None)


def exponents_from_spectrum(eigs, cluster_tol=CLUSTER_TOL):
    """Build a SpectrumReport from channel eigenvalues.

    The input is sorted by modulus (descending) defensively; the leading
    modulus must sit within 1e-6 of 1 or the map was not a valid
    trace-preserving fixed-point channel.
    """
    eigs = np.asarray(eigs, dtype=complex)
    if eigs.size == 0:
        raise SpectraError("empty spectrum")
    eigs = eigs[np.argsort(-np.abs(eigs), kind="stable")]
    moduli = np.abs(eigs)
    if abs(moduli[0] - 1.0) > LEADING_TOL:
        raise SpectraError(
            f"leading eigenvalue modulus {moduli[0]:.8f} is not 1: the map "
            f"does not preserve the trace / has no unit fixed point")
    exponents = [(rank, -2.0 * np.log2(mod))
                 for rank, mod in enumerate(moduli[1:], start=2)]
    groups = []
    current = [1]
    for rank in range(2, eigs.size + 1):
        prev, cur = moduli[rank - 2], moduli[rank - 1]
        if prev - cur < cluster_tol * max(prev, 1e-300):
            current.append(rank)
        else:
            groups.append(current)
            current = [rank]
    groups.append(current)
    return SpectrumReport(eigenvalues=eigs, exponents=exponents, groups=groups,
                          cluster_tol=cluster_tol)


def match_report(report, exact, tol_per_label=5e-2):
    """Greedily attach computed exponents to exact labels, smallest nu first.

    `exact` is a models.ExactReference; `tol_per_label` is a float or a
    {label: tol} mapping used only to flag each match as within tolerance.
    Unmatched computed exponents lying below the largest matched one are
    listed as spurious intermediates.  The nu_x * nu_z = 1 consistency
    product is reported when both labels are present.
    """
    if not exact.exponents:
        raise SpectraError("reference carries no exponents")
    if isinstance(tol_per_label, dict):
        tol_of = lambda lab: tol_per_label.get(lab, 5e-2)
    else:
        tol_of = lambda lab: float(tol_per_label)
    available = dict(report.exponents)  # rank -> nu
    matches = []
    for label, nu_exact in sorted(exact.exponents, key=lambda t: t[1]):
        if not available:
            matches.append({"label": label, "nu_exact": float(nu_exact),
                            "nu_computed": None, "abs_err": None,
                            "rank": None, "within_tol": False})
            continue
        rank = min(available, key=lambda r: abs(available[r] - nu_exact))
        nu_c = available.pop(rank)
        err = abs(nu_c - nu_exact)
        matches.append({"label": label, "nu_exact": float(nu_exact),
                        "nu_computed": float(nu_c), "abs_err": float(err),
                        "rank": rank, "within_tol": bool(err <= tol_of(label))})
    matched_nus = [m["nu_computed"] for m in matches if m["nu_computed"] is not None]
    ceiling = max(matched_nus) if matched_nus else np.inf
    moduli = np.abs(report.eigenvalues)
    spurious = [{"rank": r, "nu": float(nu), "modulus": float(moduli[r - 1])}
                for r, nu in sorted(available.items()) if nu < ceiling]
    metrics = {}
    by_label = {m["label"]: m["nu_computed"] for m in matches}
    if by_label.get("x") is not None and by_label.get("z") is not None:
        metrics["nu_x_nu_z_product_error"] = abs(by_label["x"] * by_label["z"] - 1.0)
    comparison = MatchReport(matches=matches, spurious=spurious, metrics=metrics)
    report.comparison = comparison
    return comparison


def report_as_dict(report, model=None, m=None):
    """JSON-ready view of a SpectrumReport (plus optional run identifiers)."""
    out = {
        "model": model,
        "m": m,
        "eigenvalues": [
            {"re": float(e.real), "im": float(e.imag), "modulus": float(abs(e))}
            for e in report.eigenvalues
        ],
        "exponents": [{"rank": r, "nu": float(nu)} for r, nu in report.exponents],
        "groups": report.groups,
    }
    if report.comparison is not None:
        out["matches"] = report.comparison.matches
        out["spurious"] = report.comparison.spurious
        out["metrics"] = report.comparison.metrics
    return out


def report_as_json(report, model=None, m=None):
    return json.dumps(report_as_dict(report, model=model, m=m),
                      indent=2, sort_keys=True)
