"""Command-line surface: mask generation, rendering, gradient checks, mask
fitting, training, and kernel-count sweeps.

Exit codes: 0 success, 1 usage error, 2 data/format error, 3 check failure.
Every output file is written atomically after the work succeeds, so failed
runs leave nothing partial behind.

Note on zero kernels: a mixture mask with K=0 is the all-zero mask, which
makes every attention row uniform; this is NOT the unmasked baseline.  The
sweep command therefore emits both a "none" row and a "0" row when the
k-list contains 0.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from dataclasses import dataclass, fields, replace

import numpy as np

from . import data as data_mod
from . import model as model_mod
from .attention import (
    GmmSlot,
    attention_backward,
    attention_forward,
)
from .fileio import FormatError, atomic_write_bytes, atomic_write_text
from .fitting import extroversion_score, fit_gmm_to_elm
from .mask import (
    DEFAULT_EPS,
    ElementwiseMask,
    GaussianKernel,
    init_kernels,
    load_mask_csv,
    save_mask_csv,
    unfold_mask,
    weight_matrix,
)
from .model import RunConfig, TinyViT, save_checkpoint
from .numerics import Rng

DATA_DIR_ENV = "GMMLAB_DATA_DIR"
GRADCHECK_THRESHOLD = 1e-4
# Relative error uses an absolute floor so finite-difference noise on
# near-zero gradients cannot dominate the ratio.
GRADCHECK_FLOOR = 1e-3


class UsageError(Exception):
    """Bad flags or malformed command input (exit 1)."""


class CheckFailure(Exception):
    """A requested verification did not pass (exit 3)."""


@dataclass
class CommandOutcome:
    exit_code: int
    files_written: list[str]


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse default exits with 2; we use 1
        raise UsageError(message)


# -----------------------------------------------------------------------------
# PGM writing (P2 ascii / P5 binary), maxval 255
# -----------------------------------------------------------------------------


def matrix_to_pixels(matrix: np.ndarray) -> np.ndarray:
    """Min-max normalize to integer grayscale; constant input maps to 128."""
    m = np.asarray(matrix, dtype=np.float64)
    lo, hi = m.min(), m.max()
    if hi == lo:
        return np.full(m.shape, 128, dtype=np.uint8)
    return np.rint(255.0 * (m - lo) / (hi - lo)).astype(np.uint8)


def pgm_bytes(pixels: np.ndarray, mode: str = "p5") -> bytes:
    h, w = pixels.shape
    header = f"{'P2' if mode == 'p2' else 'P5'}\n{w} {h}\n255\n".encode("ascii")
    if mode == "p2":
        body = "\n".join(" ".join(str(v) for v in row) for row in pixels) + "\n"
        return header + body.encode("ascii")
    if mode == "p5":
        return header + pixels.tobytes()
    raise UsageError(f"unknown PGM mode {mode!r}")


def write_pgm(path: str, matrix: np.ndarray, mode: str = "p5") -> None:
    atomic_write_bytes(path, pgm_bytes(matrix_to_pixels(matrix), mode))


# -----------------------------------------------------------------------------
# key=value config files; every key mirrors a CLI flag, flags win
# -----------------------------------------------------------------------------

_FLAG_TO_FIELD = {
    "dataset": "dataset",
    "image-size": "image_size",
    "channels": "channels",
    "classes": "classes",
    "patch": "patch",
    "dim": "dim",
    "depth": "depth",
    "heads": "heads",
    "mlp-ratio": "mlp_ratio",
    "mask": "mask_mode",
    "kernels": "kernels",
    "shared-kernels": "shared_kernels",
    "post-softmax-mask": "mask_after_softmax",
    "mask-eps": "mask_eps",
    "epochs": "epochs",
    "batch-size": "batch_size",
    "lr": "lr",
    "min-lr": "min_lr",
    "beta1": "beta1",
    "beta2": "beta2",
    "weight-decay": "weight_decay",
    "augment": "augment",
    "train-size": "train_size",
    "test-size": "test_size",
    "seed": "seed",
}
_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _coerce(key: str, field: str, raw: str):
    kind = _FIELD_TYPES[field]
    if kind == "bool":
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise UsageError(f"config key {key}: expected a boolean, got {raw!r}")
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError as exc:
        raise UsageError(f"config key {key}: {exc}") from exc
    return raw.strip()


def parse_config_file(path: str) -> dict:
    """Flat key=value lines with '#' comments -> RunConfig field overrides."""
    if not os.path.exists(path):
        raise FormatError(f"{path}: config file not found")
    overrides = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, raw = (part.strip() for part in line.split("=", 1))
            if key not in _FLAG_TO_FIELD:
                raise UsageError(f"{path}:{lineno}: unknown config key {key!r}")
            field = _FLAG_TO_FIELD[key]
            overrides[field] = _coerce(key, field, raw)
    return overrides


def _resolve_config(args) -> RunConfig:
    values = {}
    if getattr(args, "config", None):
        values.update(parse_config_file(args.config))
    for flag, field in _FLAG_TO_FIELD.items():
        arg_name = flag.replace("-", "_")
        if arg_name == "mask":
            arg_name = "mask_mode"
        flag_value = getattr(args, arg_name, None)
        if flag_value is not None:
            values[field] = flag_value
    try:
        return RunConfig.from_dict({**RunConfig().to_dict(), **values})
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


# -----------------------------------------------------------------------------
# Shared helpers
# -----------------------------------------------------------------------------


def _parse_kernel_list(text: str) -> list[GaussianKernel]:
    kernels = []
    for token in text.split(","):
        token = token.strip()
        if not token:
            continue
        parts = token.split(":")
        if len(parts) != 2:
            raise UsageError(f"malformed kernel {token!r}; expected alpha:sigma")
        try:
            kernels.append(GaussianKernel(alpha=float(parts[0]), sigma=float(parts[1])))
        except ValueError as exc:
            raise UsageError(f"malformed kernel {token!r}: {exc}") from exc
    return kernels


def _load_dataset(cfg: RunConfig, data_dir: str | None):
    if cfg.dataset == "synth":
        spec_train = data_mod.SynthSpec(size=cfg.image_size, classes=cfg.classes,
                                        seed=1_000_000 + cfg.seed)
        spec_test = data_mod.SynthSpec(size=cfg.image_size, classes=cfg.classes,
                                       seed=2_000_000 + cfg.seed)
        return (data_mod.synth_generate(spec_train, cfg.train_size),
                data_mod.synth_generate(spec_test, cfg.test_size))
    directory = data_dir or os.environ.get(DATA_DIR_ENV)
    if not directory:
        raise FormatError(
            f"cifar10 needs --data-dir or ${DATA_DIR_ENV} pointing at the binary batches"
        )
    train = data_mod.load_cifar10(directory, "train")
    test = data_mod.load_cifar10(directory, "test")
    if cfg.train_size:
        train = train[: cfg.train_size]
    if cfg.test_size:
        test = test[: cfg.test_size]
    return train, test


def _rel_err(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), GRADCHECK_FLOOR)


# -----------------------------------------------------------------------------
# Commands
# -----------------------------------------------------------------------------


def cmd_mask_gen(args) -> list[str]:
    if args.grid < 1:
        raise UsageError(f"--grid must be >= 1, got {args.grid}")
    if args.kernels is not None and args.random is not None:
        raise UsageError("--kernels and --random are mutually exclusive")
    if args.kernels is not None:
        kernels = _parse_kernel_list(args.kernels)
    elif args.random is not None:
        if args.random < 0:
            raise UsageError("--random must be >= 0")
        kernels = init_kernels(Rng(args.seed), args.random)
    else:
        raise UsageError("need --kernels or --random")
    if args.weight_matrix:
        matrix = weight_matrix(kernels, args.grid, args.eps)
    else:
        matrix = unfold_mask(kernels, args.grid, args.eps)
    save_mask_csv(args.out, matrix)
    print(f"wrote {args.out} ({matrix.shape[0]}x{matrix.shape[1]})")
    return [args.out]


def cmd_render(args) -> list[str]:
    matrix = load_mask_csv(args.infile)
    write_pgm(args.out, matrix, args.mode)
    print(f"wrote {args.out} ({matrix.shape[1]}x{matrix.shape[0]}, {args.mode})")
    return [args.out]


def _gradcheck_attention(args) -> dict[str, float]:
    n = args.grid * args.grid
    rng = Rng(args.seed)
    mask = None
    if args.mask == "gmm":
        slots = args.heads
        mask = GmmSlot(
            alpha=rng.normals(slots * args.kernels, 0.0, 2.0).reshape(slots, args.kernels),
            sigma=rng.normals(slots * args.kernels, 10.0, 10.0).reshape(slots, args.kernels),
            grid=args.grid, epsilon=DEFAULT_EPS,
        )
    elif args.mask == "elm":
        mask = ElementwiseMask(values=1.0 + rng.normals(n * n, 0.0, 0.3).reshape(n, n))

    from .attention import init_attention_weights

    w = init_attention_weights(rng, args.dim, args.heads, mask=mask, w_std=0.5)
    for b in (w.b_q, w.b_k, w.b_v, w.b_o):
        b[:] = rng.normals(args.dim, 0.0, 0.3)
    x = rng.normals(n * args.dim, 0.0, 1.0).reshape(n, args.dim)
    r = rng.normals(n * args.dim, 0.0, 1.0).reshape(n, args.dim)

    def loss() -> float:
        out, _ = attention_forward(x, w)
        return float((out * r).sum())

    out, trace = attention_forward(x, w)
    g = attention_backward(trace, r)
    groups: dict[str, tuple[np.ndarray, np.ndarray]] = {
        "x": (x, g.x),
        "w_q": (w.w_q, g.w_q), "b_q": (w.b_q, g.b_q),
        "w_k": (w.w_k, g.w_k), "b_k": (w.b_k, g.b_k),
        "w_v": (w.w_v, g.w_v), "b_v": (w.b_v, g.b_v),
        "w_o": (w.w_o, g.w_o), "b_o": (w.b_o, g.b_o),
    }
    if args.mask == "gmm":
        groups["mask.alpha"] = (mask.alpha, g.mask_alpha)
        groups["mask.sigma"] = (mask.sigma, g.mask_sigma)
    elif args.mask == "elm":
        groups["mask.elm"] = (mask.values, g.mask_elm)

    if args.corrupt_gradient:
        groups["w_q"][1].reshape(-1)[0] += 1e-2

    h = 1e-4
    errs = {}
    for name, (tensor, analytic) in groups.items():
        flat_t = tensor.reshape(-1)
        flat_g = analytic.reshape(-1)
        worst = 0.0
        for i in range(flat_t.size):
            orig = flat_t[i]
            flat_t[i] = orig + h
            lp = loss()
            flat_t[i] = orig - h
            lm = loss()
            flat_t[i] = orig
            worst = max(worst, _rel_err(flat_g[i], (lp - lm) / (2 * h)))
        errs[name] = worst
    return errs


def _gradcheck_model(args) -> dict[str, float]:
    cfg = RunConfig(
        dataset="synth", image_size=2 * args.grid, channels=1, classes=3, patch=2,
        dim=args.dim, depth=2, heads=args.heads, mask_mode=args.mask,
        kernels=max(1, args.kernels), batch_size=2,
    )
    rng = Rng(args.seed)
    mt = TinyViT.init(cfg, Rng(args.seed + 1))
    batch = rng.uniforms(2 * cfg.image_size * cfg.image_size).reshape(
        2, 1, cfg.image_size, cfg.image_size
    )
    labels = np.array([rng.randint(3), rng.randint(3)])
    _, grads = model_mod.loss_and_grads(mt, batch, labels)
    if args.corrupt_gradient:
        grads["patch_embed.w"].reshape(-1)[0] += 1e-2
    h = 1e-4
    errs = {}
    for name, tensor in mt.params.items():
        flat_t = tensor.reshape(-1)
        flat_g = grads[name].reshape(-1)
        stride = max(1, flat_t.size // 6)  # sample up to ~6 entries per tensor
        worst = 0.0
        for i in range(0, flat_t.size, stride):
            orig = flat_t[i]
            flat_t[i] = orig + h
            lp, _ = model_mod.loss_and_grads(mt, batch, labels)
            flat_t[i] = orig - h
            lm, _ = model_mod.loss_and_grads(mt, batch, labels)
            flat_t[i] = orig
            worst = max(worst, _rel_err(flat_g[i], (lp - lm) / (2 * h)))
        errs[name] = worst
    return errs


def cmd_gradcheck(args) -> list[str]:
    n = args.grid * args.grid
    if n > 16 or args.dim > 16:
        raise UsageError(
            f"gradcheck runs at toy sizes only (N <= 16, dim <= 16); "
            f"got N={n}, dim={args.dim}"
        )
    if args.dim % args.heads != 0:
        raise UsageError(f"--dim {args.dim} not divisible by --heads {args.heads}")
    errs = _gradcheck_model(args) if args.full_model else _gradcheck_attention(args)
    failed = False
    for name, err in errs.items():
        status = "ok" if err < GRADCHECK_THRESHOLD else "FAIL"
        failed = failed or err >= GRADCHECK_THRESHOLD
        print(f"{name:20s} max_rel_err={err:.3e}  {status}")
    if failed:
        raise CheckFailure(f"gradient mismatch above {GRADCHECK_THRESHOLD}")
    return []


def cmd_fit(args) -> list[str]:
    if args.kernels < 1:
        raise UsageError(f"--kernels must be >= 1, got {args.kernels}")
    target = load_mask_csv(args.target)
    try:
        result = fit_gmm_to_elm(
            target, args.kernels, args.steps, lr=args.lr,
            rng=Rng(args.seed), restarts=args.restarts,
        )
    except ValueError as exc:
        raise FormatError(f"{args.target}: {exc}") from exc
    fitted = unfold_mask(result.kernels, math.isqrt(target.shape[0]))
    written = []
    lines = [f"{k.alpha:.17g},{k.sigma:.17g}" for k in result.kernels]
    atomic_write_text(args.out, "\n".join(lines) + "\n")
    written.append(args.out)
    if args.trace:
        rows = ["step,loss"] + [
            f"{i},{v:.17g}" for i, v in enumerate(result.loss_trace)
        ]
        atomic_write_text(args.trace, "\n".join(rows) + "\n")
        written.append(args.trace)
    print(f"final_rmse={result.final_rmse:.6e}")
    print(f"extroversion_score={extroversion_score(fitted):.6e}")
    for path in written:
        print(f"wrote {path}")
    return written


def _run_training(cfg: RunConfig, data_dir, stop_after=None):
    train_data, test_data = _load_dataset(cfg, data_dir)
    return model_mod.train(cfg, train_data, test_data, stop_after=stop_after), test_data


def cmd_train(args) -> list[str]:
    cfg = _resolve_config(args)
    os.makedirs(args.out_dir, exist_ok=True)
    (history, ckpt), _ = _run_training(cfg, args.data_dir, args.stop_after)
    metrics_path = os.path.join(args.out_dir, "metrics.jsonl")
    ckpt_path = os.path.join(args.out_dir, "checkpoint.bin")
    params_path = os.path.join(args.out_dir, "params.json")
    atomic_write_text(metrics_path, "".join(json.dumps(h) + "\n" for h in history))
    save_checkpoint(ckpt, ckpt_path)
    total = sum(int(p.size) for p in ckpt.params.values())
    mask_only = sum(int(p.size) for k, p in ckpt.params.items() if ".mask." in k)
    atomic_write_text(params_path, json.dumps(
        {"total_params": total, "mask_params": mask_only}, indent=2) + "\n")
    for path in (metrics_path, ckpt_path, params_path):
        print(f"wrote {path}")
    if history:
        last = history[-1]
        print(f"final train_acc={last['train_acc']:.4f} test_acc={last['test_acc']:.4f}")
    return [metrics_path, ckpt_path, params_path]


def cmd_sweep_kernels(args) -> list[str]:
    base = _resolve_config(args)
    try:
        ks = sorted({int(tok) for tok in args.k_list.split(",") if tok.strip()})
    except ValueError as exc:
        raise UsageError(f"bad --k-list: {exc}") from exc
    if not ks or any(k < 0 for k in ks):
        raise UsageError("--k-list needs non-negative integers")
    if args.seeds < 1:
        raise UsageError("--seeds must be >= 1")

    rows = []
    for k in ks:
        for seed_offset in range(args.seeds):
            seed = base.seed + seed_offset
            variants = []
            if k == 0:
                # K=0 is the all-zero mask (uniform attention), distinct from
                # the unmasked baseline; emit both, labeled.
                variants.append(("none", replace(base, mask_mode="none", seed=seed)))
                variants.append(("0", replace(base, mask_mode="gmm", kernels=0, seed=seed)))
            else:
                variants.append((str(k), replace(base, mask_mode="gmm", kernels=k, seed=seed)))
            for label, cfg in variants:
                (history, ckpt), test_data = _run_training(cfg, args.data_dir)
                if history:
                    acc = history[-1]["test_acc"]
                else:
                    acc = model_mod.evaluate(
                        TinyViT(config=cfg, params=ckpt.params), test_data
                    )
                rows.append((label, seed, acc))
                print(f"k={label} seed={seed} final_test_acc={acc:.4f}")
    body = "k,seed,final_test_acc\n" + "".join(
        f"{label},{seed},{acc:.6f}\n" for label, seed, acc in rows
    )
    atomic_write_text(args.out, body)
    print(f"wrote {args.out}")
    return [args.out]


# -----------------------------------------------------------------------------
# Parser
# -----------------------------------------------------------------------------


def _add_config_flags(p: _Parser) -> None:
    p.add_argument("--config", help="key=value config file; flags override it")
    p.add_argument("--dataset", choices=["synth", "cifar10"])
    p.add_argument("--mask", dest="mask_mode", choices=["gmm", "elm", "none"])
    p.add_argument("--image-size", type=int)
    p.add_argument("--channels", type=int)
    p.add_argument("--classes", type=int)
    p.add_argument("--patch", type=int)
    p.add_argument("--dim", type=int)
    p.add_argument("--depth", type=int)
    p.add_argument("--heads", type=int)
    p.add_argument("--mlp-ratio", type=int)
    p.add_argument("--kernels", type=int)
    p.add_argument("--shared-kernels", action="store_const", const=True,
                   help="one kernel set per layer shared by all heads")
    p.add_argument("--post-softmax-mask", action="store_const", const=True,
                   dest="post_softmax_mask",
                   help="apply the mask to the softmax output (experiment switch)")
    p.add_argument("--mask-eps", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--min-lr", type=float)
    p.add_argument("--beta1", type=float)
    p.add_argument("--beta2", type=float)
    p.add_argument("--weight-decay", type=float)
    p.add_argument("--augment", action="store_const", const=True)
    p.add_argument("--no-augment", action="store_const", const=False, dest="augment")
    p.add_argument("--train-size", type=int)
    p.add_argument("--test-size", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--data-dir", help=f"CIFAR-10 binary batch dir (default ${DATA_DIR_ENV})")


def build_parser() -> _Parser:
    parser = _Parser(prog="gmmlab", description=__doc__,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("mask-gen", help="write a mixture mask as CSV",
                       parents=[], description="Generate an unfolded N x N mask "
                       "(or the raw (2g-1)-sided weight matrix) from kernels.")
    p.add_argument("--grid", type=int, required=True, help="patch grid side g (N = g^2)")
    p.add_argument("--kernels", help='kernel list "alpha:sigma[,alpha:sigma...]"; '
                   '"" means zero kernels (all-zero mask)')
    p.add_argument("--random", type=int, help="draw this many kernels from the init distributions")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--eps", type=float, default=DEFAULT_EPS)
    p.add_argument("--out", required=True)
    p.add_argument("--weight-matrix", action="store_true",
                   help="write the (2g-1)-sided offset table instead of the unfolded mask")
    p.set_defaults(func=cmd_mask_gen)

    p = sub.add_parser("render", help="render a mask CSV as a PGM image")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=["p2", "p5"], default="p5")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("gradcheck", help="verify analytic gradients against finite differences")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--grid", type=int, default=2)
    p.add_argument("--dim", type=int, default=8)
    p.add_argument("--heads", type=int, default=1)
    p.add_argument("--kernels", type=int, default=2)
    p.add_argument("--mask", choices=["gmm", "elm", "none"], default="gmm")
    p.add_argument("--full-model", action="store_true",
                   help="check a whole toy transformer instead of one attention block")
    p.add_argument("--corrupt-gradient", action="store_true",
                   help="negative-control test hook: corrupt one gradient entry")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("fit", help="fit mixture kernels to a target mask CSV")
    p.add_argument("--target", required=True)
    p.add_argument("--kernels", type=int, required=True)
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--restarts", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="fitted kernels CSV (alpha,sigma per line)")
    p.add_argument("--trace", help="optional loss trace CSV (step,loss)")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("train", help="train the tiny transformer; writes metrics/checkpoint")
    _add_config_flags(p)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--stop-after", type=int,
                   help="stop after this many epochs (same schedule horizon); resume-friendly")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser(
        "sweep-kernels",
        help="train across kernel counts; K=0 adds a labeled 'none' baseline row",
    )
    _add_config_flags(p)
    p.add_argument("--k-list", required=True, help='comma list, e.g. "1,2,5" (duplicates dropped)')
    p.add_argument("--seeds", type=int, default=1, help="run seeds base..base+n-1")
    p.add_argument("--out", required=True, help="result CSV (k,seed,final_test_acc)")
    p.set_defaults(func=cmd_sweep_kernels)

    return parser


def run(argv=None) -> CommandOutcome:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if getattr(args, "command", None) is None:
            parser.print_usage(sys.stderr)
            return CommandOutcome(1, [])
        written = args.func(args)
        return CommandOutcome(0, written or [])
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return CommandOutcome(1, [])
    except (FormatError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return CommandOutcome(2, [])
    except ValueError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return CommandOutcome(1, [])
    except CheckFailure as exc:
        print(f"check failed: {exc}", file=sys.stderr)
        return CommandOutcome(3, [])


def main(argv=None) -> int:
    return run(argv).exit_code


if __name__ == "__main__":
    sys.exit(main())
