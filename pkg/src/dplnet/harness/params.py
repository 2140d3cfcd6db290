"""Closed-form parameter report."""

from __future__ import annotations

from ..model import SUBTOTAL_KEYS, count_parameters, dplnet_config

REPORT_CLASSES = {"toy": 5, "mit_b5_shape": 41}
# Published reference figures the b5-shape counts are compared against.
REFERENCE = {"decoder": 3_270_000, "prompts": 3_880_000, "prompt_pct": 4.4, "full_model": 88_580_000}
BACKBONE_RANGE = (81_000_000, 89_000_000)


def param_report(preset: str) -> dict:
    cfg = dplnet_config(preset, num_classes=REPORT_CLASSES.get(preset, 5))
    sub = count_parameters(cfg)
    prompts = sub["aux_embed"] + sub["mpg"] + sub["mfa"]
    trainable = prompts + sub["decoder"]
    return {
        "preset": preset,
        "num_classes": cfg.num_classes,
        "decoder_dim": cfg.decoder_dim,
        "subtotals": sub,
        "prompts": prompts,
        "trainable": trainable,
        "frozen": sub["backbone"],
        "total": trainable + sub["backbone"],
        "prompt_pct": 100.0 * prompts / sub["backbone"],
    }


def format_report(rep: dict) -> str:
    lines = [f"preset\t{rep['preset']}\tclasses={rep['num_classes']}\tdecoder_dim={rep['decoder_dim']}"]
    for k in SUBTOTAL_KEYS:
        lines.append(f"{k}\t{rep['subtotals'][k]:,}")
    lines += [
        f"prompts (aux_embed+mpg+mfa)\t{rep['prompts']:,}",
        f"trainable total\t{rep['trainable']:,}",
        f"frozen total\t{rep['frozen']:,}",
        f"all parameters\t{rep['total']:,}",
        f"prompts / backbone\t{rep['prompt_pct']:.2f}%\t(reference {REFERENCE['prompt_pct']}%)",
    ]
    if rep["preset"] == "mit_b5_shape":
        dec = rep["subtotals"]["decoder"]
        ratio = rep["prompts"] / REFERENCE["prompts"]
        lo, hi = BACKBONE_RANGE
        lines += [
            f"decoder vs reference {REFERENCE['decoder']:,}\t{100 * (dec / REFERENCE['decoder'] - 1):+.1f}%",
            f"backbone vs reference range {lo:,}-{hi:,}\t"
            f"{'inside' if lo * 0.9 <= rep['frozen'] <= hi * 1.1 else 'outside'} the +-10% band",
            f"prompts vs reference {REFERENCE['prompts']:,}\t{ratio:.2f}x",
            "note\tthe prompt layers here (one bottleneck generator per stage, one token adapter per "
            "attention layer) give about a quarter of the reference prompt budget; the reference "
            "figure is not broken down by layer, so the missing parameters cannot be attributed",
        ]
    return "\n".join(lines)
