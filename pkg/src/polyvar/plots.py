"""Log-log plots of rate studies."""

import logging
import math

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

logger = logging.getLogger(__name__)


def plot_rate_study(result, path: str) -> str:
    """
    Plot d_W and d_K against n on log-log axes with bootstrap error bars,
    the fitted line, the TV bound envelope and the predicted slope.
    """
    frame = result.to_frame()
    n = frame["n"].to_numpy(dtype=float)

    plt.figure(figsize=(8, 6))
    plt.errorbar(
        n,
        frame["dW_hat"],
        yerr=1.96 * frame["dW_se"].fillna(0.0),
        fmt="bo-",
        capsize=3,
        label="Wasserstein-1 (empirical)",
    )
    if frame["dK_hat"].notna().any():
        plt.plot(n, frame["dK_hat"], "gs--", label="Kolmogorov (empirical)")
    bound = frame["tv_bound"].to_numpy(dtype=float)
    finite = np.isfinite(bound)
    if finite.any():
        plt.plot(n[finite], bound[finite], "k:", label="total-variation bound")

    fit = result.fit
    if fit is not None:
        plt.plot(
            n,
            np.exp(fit.intercept) * n**fit.slope,
            "r-",
            linewidth=2,
            label=f"fit slope {fit.slope:.3f} [{fit.ci95[0]:.3f}, {fit.ci95[1]:.3f}]",
        )
        slope = result.predicted_slope
        if slope is not None and math.isfinite(slope):
            anchor = math.exp(fit.intercept) * n[0] ** fit.slope
            plt.plot(
                n,
                anchor * (n / n[0]) ** slope,
                "m--",
                alpha=0.7,
                label=f"predicted {result.predicted_class} ({slope:+.3f})",
            )

    plt.xscale("log")
    plt.yscale("log")
    plt.xlabel("n", fontsize=12)
    plt.ylabel("distance to normal", fontsize=12)
    plt.title(result.run_name, fontsize=14)
    plt.grid(True, alpha=0.3, which="both")
    plt.legend()
    plt.tight_layout()
    plt.savefig(path, dpi=150)
    plt.close()
    logger.info(f"Rate plot saved to {path}")
    return path
