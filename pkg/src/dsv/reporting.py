"""Text tables and SVG figures, built only from stored EvalReport JSON."""
from pathlib import Path

import numpy as np


def _fmt(v, spec="{:.2f}"):
    return "-" if v is None else spec.format(v)


def _table(header, rows):
    widths = [max(len(str(r[i])) for r in [header] + rows) for i in range(len(header))]
    line = "  ".join(f"{{:<{w}}}" if i == 0 else f"{{:>{w}}}" for i, w in enumerate(widths))
    out = [line.format(*header), line.format(*["-" * w for w in widths])]
    out += [line.format(*r) for r in rows]
    return "\n".join(out)


def format_report(reports):
    """``reports``: list of (name, report dict). One row per report."""
    kinds = sorted({k.rsplit("/", 1)[1] for _, r in reports for k in r.get("probes", {})})

    rows = []
    for name, r in reports:
        p = r.get("probes", {})
        rows.append([name, _fmt(r.get("eer", {}).get("sequential_cosine"))]
                    + [_fmt(p.get(f"speaker/sequential/{k}"), "{:.3f}") for k in kinds])
    speaker = _table(["model", "EER % (cosine)"] + [f"spk acc {k}" for k in kinds], rows)

    rows = []
    for name, r in reports:
        p = r.get("probes", {})
        for k in kinds:
            rows.append([f"{name} [{k}]",
                         _fmt(p.get(f"speaker/sequential/{k}"), "{:.3f}"),
                         _fmt(p.get(f"speaker/segmental/{k}"), "{:.3f}"),
                         _fmt(p.get(f"content/segmental/{k}"), "{:.3f}"),
                         _fmt(p.get(f"content/sequential/{k}"), "{:.3f}")])
    probes = _table(["model [probe]", "spk|seq", "spk|seg", "content|seg", "content|seq"], rows)

    rows = []
    for name, r in reports:
        conv = r.get("conversion", {})
        for cond, c in sorted(conv.get("conditions", {}).items()):
            rows.append([f"{name} [{cond}]", _fmt(c.get("eer_a")), _fmt(c.get("eer_b")),
                         _fmt(c.get("eer_c")), _fmt(c.get("nd"))])
    nd = _table(["model [condition]", "EER_A %", "EER_B %", "EER_C %", "ND"], rows)

    closer = ", ".join(f"{name}: {_fmt(r.get('conversion', {}).get('closer_to_target'), '{:.3f}')}"
                       for name, r in reports)
    return "\n\n".join([
        "Speaker identity from sequential features", speaker,
        "Probe accuracy by latent and factor", probes,
        "Voice conversion (smaller ND: closer to target)", nd,
        f"Re-encoded conversions closer to target than source: {closer}",
    ]) + "\n"


def _roc(trials):
    s = np.asarray(trials["scores"])
    y = np.asarray(trials["is_target"], dtype=bool)
    order = np.argsort(-s, kind="stable")
    tar = np.r_[0, np.cumsum(y[order])] / max(y.sum(), 1)
    non = np.r_[0, np.cumsum(~y[order])] / max((~y).sum(), 1)
    return non, 1 - tar


def write_plots(report, out_dir):
    """ROC of the sequential cosine trials and, when present, the loss curves."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    matplotlib.rcParams["svg.hashsalt"] = "dsv"
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []

    trials = report.get("provenance", {}).get("sequential_trials")
    if trials:
        far, frr = _roc(trials)
        fig, ax = plt.subplots(figsize=(4, 4))
        ax.plot(far * 100, frr * 100)
        ax.plot([0, 100], [0, 100], ":", color="grey")
        ax.set_xlabel("false acceptance %")
        ax.set_ylabel("false rejection %")
        ax.set_title(f"cosine EER {report['eer']['sequential_cosine']:.2f}%")
        path = out_dir / "roc_sequential.svg"
        fig.savefig(path, metadata={"Date": None})
        plt.close(fig)
        written.append(path)

    hist = report.get("training_log")
    if hist:
        fig, ax = plt.subplots(figsize=(5, 3.5))
        for split in ("train", "dev"):
            pts = [(h["epoch"], h["total"]) for h in hist if h["split"] == split]
            if pts:
                ax.plot(*zip(*pts), label=split)
        ax.set_xlabel("epoch")
        ax.set_ylabel("total loss")
        ax.legend()
        path = out_dir / "loss.svg"
        fig.savefig(path, metadata={"Date": None})
        plt.close(fig)
        written.append(path)
    return written
