"""Command-line entry point: ``stnat <subcommand> ...``.

Exit status is 0 only when every utterance was processed and no error
occurred; errors go to stderr as ``stnat: error: ...``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from importlib import resources
from pathlib import Path

import numpy as np

from . import __version__
from .data import (FormatError, Vocab, load_manifest, read_transcripts, synth_corpus,
                   synth_vocab, write_alignments, write_features, write_manifest)
from .evaluation import (corpus_cer, edit_counts, export_attention, length_histogram, rtf,
                         spike_boundary_report, write_ledger)
from .infer import batch_decode, write_hypotheses
from .lm import LmConfig, LmTrainConfig, TransformerLM, lm_train, perplexity
from .network import STNAT
from .train import read_config, split_config, train_loop, write_averaged

log = logging.getLogger("stnat")

BETA_GRID = (0.1, 0.3, 0.5, 0.7)
PRESETS = ("toy", "paper")


class CliError(Exception):
    pass


def _write_run(path: Path, command: str, args: argparse.Namespace, **extra) -> None:
    spec = {
        "command": command,
        "version": __version__,
        "args": {k: (str(v) if isinstance(v, Path) else v)
                 for k, v in vars(args).items() if k != "func"},
        **extra,
    }
    path.write_text(json.dumps(spec, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _prepare_out_dir(out: Path, force: bool) -> None:
    if out.exists() and any(out.iterdir()) and not force:
        raise CliError(f"output directory {out} is not empty (use --force)")
    out.mkdir(parents=True, exist_ok=True)


def _config_path(name: str) -> Path:
    if name in PRESETS:
        return Path(str(resources.files("stnat") / "configs" / f"{name}.cfg"))
    p = Path(name)
    if not p.exists():
        raise CliError(f"config not found: {name} (presets: {', '.join(PRESETS)})")
    return p


def _vocab_for(args, manifest: Path) -> Vocab:
    path = Path(args.vocab) if args.vocab else manifest.parent / "vocab.txt"
    if not path.exists():
        raise CliError(f"vocabulary not found: {path} (pass --vocab)")
    return Vocab.load(path)


def _alignments_for(args, manifest: Path):
    if getattr(args, "alignments", None):
        return Path(args.alignments)
    p = manifest.parent / "alignments.tsv"
    return p if p.exists() else None


def _load_model(path) -> STNAT:
    path = Path(path)
    if not path.exists():
        raise CliError(f"checkpoint not found: {path}")
    return STNAT.load(path).eval()


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    if args.n < 1:
        raise CliError("--n must be at least 1")
    if args.n_dev < 0:
        raise CliError("--n-dev must be >= 0")
    out = Path(args.out)
    _prepare_out_dir(out, args.force)
    vocab = synth_vocab(args.vocab)
    utts = synth_corpus(args.n + args.n_dev, args.vocab, args.seed)
    train, dev = utts[: args.n], utts[args.n:]
    vocab.save(out / "vocab.txt")
    write_manifest(train, vocab, out / "train.tsv", out / "feats")
    if dev:
        write_manifest(dev, vocab, out / "dev.tsv", out / "feats")
    write_alignments(utts, out / "alignments.tsv")
    _write_run(out / "run.json", "synth", args)
    print(f"wrote {len(train)} train / {len(dev)} dev utterances to {out}")
    return 0


def cmd_train(args) -> int:
    train_manifest = Path(args.train_manifest)
    vocab = _vocab_for(args, train_manifest)
    values = read_config(_config_path(args.config))
    model_cfg, train_cfg = split_config(values, len(vocab))
    train_utts = load_manifest(train_manifest, vocab)
    dev_utts = load_manifest(args.dev_manifest, vocab) if args.dev_manifest else []
    out = Path(args.out)
    _prepare_out_dir(out, args.force)
    t0 = time.perf_counter()
    res = train_loop(train_utts, model_cfg, train_cfg, args.seed, vocab.eos, vocab.pad,
                     out_dir=out, metrics_path=out / "metrics.jsonl")
    elapsed = time.perf_counter() - t0
    k = min(train_cfg.average_last_k, len(res.checkpoints))
    write_averaged(res.checkpoints[-k:], out / "averaged.ckpt")
    vocab.save(out / "vocab.txt")
    summary = {"steps": len(res.metrics), "train_seconds": elapsed, "averaged_over": k}
    if dev_utts:
        model = STNAT.load(out / "averaged.ckpt").eval()
        dec = batch_decode(model, dev_utts)
        summary["dev_cer"] = corpus_cer((dec.hypotheses[u.id], u.transcript)
                                        for u in dev_utts if u.id in dec.hypotheses)
        hist = length_histogram((len(u.transcript), dec.lengths[u.id])
                                for u in dev_utts if u.id in dec.lengths)
        summary["dev_exact_length"] = hist.exact_fraction
        summary["dev_miss"] = hist.miss_fraction
        print(f"dev CER {summary['dev_cer']:.4f}  exact length {hist.exact_fraction:.3f}  "
              f"miss {hist.miss_fraction:.3f}")
    _write_run(out / "run.json", "train", args, seed=args.seed,
               model_config=model_cfg.to_dict(), train_config=vars(train_cfg), summary=summary)
    print(f"trained {len(res.metrics)} steps in {elapsed:.1f}s; averaged {k} checkpoints "
          f"-> {out / 'averaged.ckpt'}")
    return 0


def cmd_train_lm(args) -> int:
    manifest = Path(args.manifest)
    vocab = _vocab_for(args, manifest)
    corpus = [vocab.encode(t) for t in read_transcripts(manifest).values() if t]
    if not corpus:
        raise CliError(f"no transcripts in {manifest}")
    cfg = LmConfig(len(vocab), n_blocks=args.blocks, d_m=args.d_m, n_heads=args.heads,
                   d_ff=2 * args.d_m, context=args.context)
    tcfg = LmTrainConfig(epochs=args.epochs, batch_size=args.batch_size, warmup=args.warmup)
    model, losses = lm_train(corpus, cfg, tcfg, args.seed, vocab.eos, vocab.pad)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    model.save(out)
    ppl = perplexity(model, corpus, vocab.eos)
    _write_run(out.with_suffix(out.suffix + ".run.json"), "train-lm", args, seed=args.seed,
               lm_config=cfg.to_dict(), final_loss=losses[-1], train_perplexity=ppl)
    print(f"LM trained {len(losses)} steps; train perplexity {ppl:.3f} -> {out}")
    return 0


def cmd_decode(args) -> int:
    manifest = Path(args.manifest)
    model = _load_model(args.ckpt)
    vocab = _vocab_for(args, manifest)
    if len(vocab) != model.cfg.vocab_size:
        raise CliError(f"vocabulary has {len(vocab)} ids, checkpoint expects {model.cfg.vocab_size}")
    lm = None
    if args.lm:
        if not Path(args.lm).exists():
            raise CliError(f"LM checkpoint not found: {args.lm}")
        lm = TransformerLM.load(args.lm)
    if args.lam < 0:
        raise CliError("--lambda must be >= 0")
    beam = args.beam if args.beam is not None else (5 if lm is not None else 1)
    utts = load_manifest(manifest, vocab)
    res = batch_decode(model, utts, lm=lm, lam=args.lam, beam=beam, beta=args.beta)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_hypotheses(res.hypotheses, vocab, out)
    extra = {"decoded": len(res.hypotheses), "failures": res.failures, "beam": beam}
    if args.rtf:
        ledger = Path(args.ledger) if args.ledger else out.with_suffix(".ledger.tsv")
        write_ledger(res.ledger, ledger)
        report = rtf(res.ledger)
        extra["rtf"] = report.rtf
        print(f"RTF {report.rtf:.6f} ({report.decode_seconds:.3f}s decode / "
              f"{report.audio_seconds:.2f}s audio) -> {ledger}")
    _write_run(out.with_suffix(".run.json"), "decode", args, **extra)
    for uid, msg in res.failures.items():
        print(f"stnat: failed {uid}: {msg}", file=sys.stderr)
    print(f"decoded {len(res.hypotheses)}/{len(utts)} utterances -> {out}")
    return 1 if res.failures else 0


def cmd_eval(args) -> int:
    hyp = read_transcripts(args.hyp)
    ref = read_transcripts(args.ref)
    missing = sorted(set(ref) - set(hyp))
    extra = sorted(set(hyp) - set(ref))
    if missing or extra:
        lines = []
        if missing:
            lines.append(f"missing from hypotheses: {', '.join(missing)}")
        if extra:
            lines.append(f"not in reference: {', '.join(extra)}")
        raise CliError("utterance ids differ; " + "; ".join(lines))
    rows = []
    for uid in ref:
        if not ref[uid]:
            raise CliError(f"empty reference for {uid}")
        c = edit_counts(list(hyp[uid]), list(ref[uid]))
        rows.append((uid, c))
    dist = sum(c.distance for _, c in rows)
    total = sum(c.ref_len for _, c in rows)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as f:
            f.write("id\tdistance\tsub\tdel\tins\tref_len\n")
            for uid, c in rows:
                f.write(f"{uid}\t{c.distance}\t{c.substitutions}\t{c.deletions}\t"
                        f"{c.insertions}\t{c.ref_len}\n")
        out = Path(args.out)
        _write_run(out.with_suffix(".run.json"), "eval", args, cer=dist / total,
                   errors=dist, ref_chars=total)
    print(f"CER\t{dist / total:.6f}\t{dist}\t{total}")
    return 0


def cmd_analyze(args) -> int:
    from .plotting import plot_attention, plot_length_histogram, plot_spikes

    manifest = Path(args.manifest)
    model = _load_model(args.ckpt)
    vocab = _vocab_for(args, manifest)
    utts = load_manifest(manifest, vocab, _alignments_for(args, manifest))
    if not utts:
        raise CliError("empty manifest")
    out = Path(args.out)
    _prepare_out_dir(out, args.force)
    beta = model.cfg.beta if args.beta is None else args.beta

    pairs, spike_rows = [], []
    inside = total = gap_hits = 0
    grids = {}
    for u in utts:
        grid, trig, _ = model.forward_st_nat(u.features, beta)
        grids[u.id] = (1.0 - grid.blank_probs(), trig.positions)
        pairs.append((len(u.transcript), len(trig)))
        if u.boundaries is not None:
            rep = spike_boundary_report(trig.positions, u.boundaries, u.frames)
            for t, lab in zip(rep.positions, rep.labels):
                spike_rows.append(f"{u.id}\t{t}\t{'silence' if lab < 0 else lab}")
            inside += sum(lab >= 0 for lab in rep.labels)
            total += len(rep.labels)
            gap_hits += rep.silence_gap_hits

    hist = length_histogram(pairs)
    with open(out / "length_histogram.tsv", "w", encoding="utf-8") as f:
        f.write("T_minus_Tpred\tcount\n")
        for k, c in hist.rows():
            f.write(f"{k}\t{c}\n")
    with open(out / "spikes.tsv", "w", encoding="utf-8") as f:
        f.write("id\tencoder_frame\ttoken\n")
        f.write("\n".join(spike_rows) + ("\n" if spike_rows else ""))

    target = next((u for u in utts if u.id == args.utt), None) if args.utt else utts[0]
    if target is None:
        raise CliError(f"utterance {args.utt!r} not in manifest")
    layer = args.layer if args.layer is not None else model.cfg.n_dec_blocks - 1
    attn = export_attention(model, target.features, layer, args.head)
    write_features(attn, out / "attention.fmat")

    plot_length_histogram(hist, out / "length_histogram.png")
    nb, pos = grids[target.id]
    plot_spikes(nb, pos, target.boundaries, beta, out / "spikes.png")
    plot_attention(attn, out / "attention.png")

    summary = {"utterances": len(utts), "exact_length": hist.exact_fraction,
               "miss": hist.miss_fraction, "attention_utt": target.id,
               "attention_layer": layer, "attention_head": args.head}
    if total:
        summary["spikes_inside"] = inside / total
        summary["spikes_in_long_silence"] = gap_hits
    _write_run(out / "run.json", "analyze", args, summary=summary)
    print(f"exact length {hist.exact_fraction:.3f}  miss {hist.miss_fraction:.3f}"
          + (f"  spikes inside {inside / total:.3f}  long-silence hits {gap_hits}" if total else ""))
    return 0


def cmd_bench(args) -> int:
    manifest = Path(args.manifest)
    model = _load_model(args.ckpt)
    vocab = _vocab_for(args, manifest)
    utts = load_manifest(manifest, vocab)
    betas = [float(b) for b in args.betas.split(",")] if args.betas else list(BETA_GRID)
    rows, failures = [], 0
    for b in betas:
        res = batch_decode(model, utts, beta=b)
        failures += len(res.failures)
        done = [u for u in utts if u.id in res.hypotheses]
        hist = length_histogram((len(u.transcript), res.lengths[u.id]) for u in done)
        tp = np.array([res.lengths[u.id] for u in done], dtype=float)
        rows.append({
            "beta": b,
            "tpred_mean": float(tp.mean()) if tp.size else 0.0,
            "tpred_std": float(tp.std()) if tp.size else 0.0,
            "exact": hist.exact_fraction,
            "miss": hist.miss_fraction,
            "cer": corpus_cer((res.hypotheses[u.id], u.transcript) for u in done),
            "rtf": rtf(res.ledger).rtf if res.ledger else float("nan"),
        })
    cols = ["beta", "tpred_mean", "tpred_std", "exact", "miss", "cer", "rtf"]
    lines = ["\t".join(cols)] + ["\t".join(f"{r[c]:.6g}" for c in cols) for r in rows]
    print("\n".join(lines))
    if args.out:
        from .plotting import plot_beta_sweep

        out = Path(args.out)
        _prepare_out_dir(out, args.force)
        (out / "bench.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8")
        plot_beta_sweep(rows, out / "bench.png")
        _write_run(out / "run.json", "bench", args, rows=rows)
    return 1 if failures else 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="stnat", description="Spike-triggered NAT speech recognizer")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic corpus")
    s.add_argument("--out", required=True)
    s.add_argument("--n", type=int, default=128, help="training utterances")
    s.add_argument("--n-dev", type=int, default=32, help="dev utterances")
    s.add_argument("--vocab", type=int, default=20, help="number of characters")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--force", action="store_true")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="train an ST-NAT model")
    s.add_argument("--config", default="toy", help="preset name (toy, paper) or config path")
    s.add_argument("--train-manifest", required=True)
    s.add_argument("--dev-manifest")
    s.add_argument("--vocab", help="vocab file (default: vocab.txt beside the train manifest)")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--force", action="store_true", help="allow a non-empty output directory")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("train-lm", help="train the character LM on manifest transcripts")
    s.add_argument("--manifest", required=True)
    s.add_argument("--vocab")
    s.add_argument("--out", required=True, help="LM checkpoint path")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--epochs", type=int, default=20)
    s.add_argument("--batch-size", type=int, default=32)
    s.add_argument("--warmup", type=int, default=200)
    s.add_argument("--blocks", type=int, default=2)
    s.add_argument("--d-m", type=int, default=64)
    s.add_argument("--heads", type=int, default=4)
    s.add_argument("--context", type=int, default=128)
    s.set_defaults(func=cmd_train_lm)

    s = sub.add_parser("decode", help="decode a manifest")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--vocab")
    s.add_argument("--out", required=True, help="hypothesis file")
    s.add_argument("--lm", help="LM checkpoint for shallow fusion")
    s.add_argument("--lambda", dest="lam", type=float, default=0.0)
    s.add_argument("--beam", type=int, help="beam width (default 5 with --lm, else 1)")
    s.add_argument("--beta", type=float, help="trigger threshold (default from checkpoint)")
    s.add_argument("--rtf", action="store_true", help="sequential timing ledger + RTF")
    s.add_argument("--ledger", help="ledger path (default: <out>.ledger.tsv)")
    s.set_defaults(func=cmd_decode)

    s = sub.add_parser("eval", help="score hypotheses against references")
    s.add_argument("--hyp", required=True)
    s.add_argument("--ref", required=True, help="manifest or id<TAB>text file")
    s.add_argument("--out", help="per-utterance TSV")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("analyze", help="length, spike and attention reports")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--vocab")
    s.add_argument("--alignments", help="default: alignments.tsv beside the manifest")
    s.add_argument("--out", required=True)
    s.add_argument("--beta", type=float)
    s.add_argument("--utt", help="utterance for the spike and attention plots")
    s.add_argument("--layer", type=int, help="decoder layer (default: last)")
    s.add_argument("--head", type=int, default=0)
    s.add_argument("--force", action="store_true")
    s.set_defaults(func=cmd_analyze)

    s = sub.add_parser("bench", help="sweep the trigger threshold")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--vocab")
    s.add_argument("--betas", help="comma-separated thresholds (default 0.1,0.3,0.5,0.7)")
    s.add_argument("--out", help="directory for bench.tsv and bench.png")
    s.add_argument("--force", action="store_true")
    s.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except (CliError, FormatError, FileNotFoundError, ValueError, OSError) as e:
        print(f"stnat: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
