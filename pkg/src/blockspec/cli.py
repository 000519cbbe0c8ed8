"""Command-line surface: checkpoint init, corpus generation, drafter
training, decoding, batch benchmarking, and the correctness oracle suite.

Exit codes: 0 ok, 1 failed check, 2 usage error (argparse default).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .checkpoint import load_checkpoint, save_checkpoint
from .corpus import CorpusSpec, gen_corpus, load_corpus
from .engine import DecodeEngine, acceptance_length_tau
from .model import ModelConfig, init_draft, init_frozen, random_draft, trainable_fraction
from .oracle import run_all
from .pretrain import pretrain_target
from .sampler import RngStream
from .scheduler import CostProfile, run_batch
from .trainer import AdamState, TrainConfig, train_step


def _load_config(path: str | None) -> ModelConfig:
    if path is None:
        return ModelConfig()
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    if "model" in data:
        data = data["model"]
    return ModelConfig.from_dict(data)


def _write_or_print(text: str, out: str | None):
    if out:
        Path(out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def cmd_init(args) -> int:
    config = _load_config(args.config)
    if args.corpus:
        sequences = load_corpus(args.corpus)
        frozen = pretrain_target(
            config, sequences, steps=args.pretrain_steps, lr=args.pretrain_lr,
            seed=args.seed, log_every=args.log_every,
        )
    else:
        frozen = init_frozen(config, args.seed)
    if args.draft_init == "random":
        draft = random_draft(config, args.seed + 1)
    else:
        draft = init_draft(config, frozen, args.seed + 1)
    save_checkpoint(args.out, config, frozen, draft)
    frac = trainable_fraction(config, frozen, draft)
    print(f"wrote {args.out}: {draft.n_params()} trainable parameters "
          f"({100 * frac:.1f}% of the frozen target)")
    return 0


def cmd_gen_corpus(args) -> int:
    spec = CorpusSpec(
        vocab_size=args.vocab, transition_seed=args.seed,
        n_sequences=args.seqs, seq_len=args.len, sharpness=args.sharpness,
    )
    path = gen_corpus(spec, args.out)
    print(f"wrote {path}: {spec.n_sequences} sequences of {spec.seq_len} tokens")
    return 0


def cmd_train(args) -> int:
    config, frozen, draft = load_checkpoint(args.checkpoint_in)
    sequences = load_corpus(args.corpus)
    train_cfg = TrainConfig(
        decay=args.decay, lr=args.lr, steps=args.steps,
        anchors_per_seq=args.anchors, batch_seqs=args.batch_seqs,
    )
    rng = RngStream(seed=args.seed, stream_id=0)
    adam = AdamState(draft.param_items(), train_cfg.beta1, train_cfg.beta2, train_cfg.eps)
    n = len(sequences)
    for step in range(train_cfg.steps):
        batch = [sequences[(step * train_cfg.batch_seqs + j) % n] for j in range(train_cfg.batch_seqs)]
        metrics = train_step(config, frozen, draft, batch, train_cfg, rng, step, adam)
        if args.log_every and (step + 1) % args.log_every == 0:
            record = {
                "step": step + 1,
                "draft_loss": metrics["draft_loss"],
                "calib_loss": metrics["calib_loss"],
                "acc": [round(a, 4) for a in metrics["slot_accuracy"]],
            }
            print(json.dumps(record))
    save_checkpoint(args.checkpoint_out, config, frozen, draft)
    print(f"wrote {args.checkpoint_out}")
    return 0


def cmd_decode(args) -> int:
    config, frozen, draft = load_checkpoint(args.checkpoint)
    engine = DecodeEngine(config, frozen, draft)
    prompt = [int(t) for t in args.prompt.split()]
    mode = args.mode if args.mode != "auto" else ("parallel" if 1 <= args.threshold else "sequential")
    result = engine.decode(
        prompt, RngStream(seed=args.seed, stream_id=0), mode=mode,
        max_new_tokens=args.max_tokens, temperature=args.temperature,
        theta=args.theta, stop_token=args.stop_token,
    )
    lines = [json.dumps({
        "prompt": prompt,
        "response": result.response,
        "mode": mode,
        "steps": len(result.steps),
        "tau": acceptance_length_tau(result.steps) if result.steps else None,
    })]
    lines += [json.dumps(s.to_record()) for s in result.steps]
    _write_or_print("\n".join(lines) + "\n", args.out)
    return 0


def cmd_bench(args) -> int:
    config, frozen, draft = load_checkpoint(args.checkpoint)
    engine = DecodeEngine(config, frozen, draft)
    sequences = load_corpus(args.corpus)
    profile = CostProfile(alpha=args.alpha, beta=args.beta, saturation=args.saturation)
    batches = [int(b) for b in args.batches.split(",")]
    chunks = []
    for batch in batches:
        if batch > len(sequences):
            raise SystemExit(f"corpus has only {len(sequences)} sequences, need {batch}")
        prompts = [seq[: args.prompt_len] for seq in sequences[:batch]]
        report = run_batch(
            engine, prompts, seed=args.seed, mode=args.mode, threshold=args.threshold,
            theta=args.theta, temperature=args.temperature,
            max_new_tokens=args.max_tokens, profile=profile,
        )
        chunks.append(report.to_json_lines())
    _write_or_print("".join(chunks), args.out)
    return 0


def cmd_oracle(args) -> int:
    checkpoint = load_checkpoint(args.checkpoint) if args.checkpoint else None
    results = run_all(seed=args.seed, quick=args.quick, checkpoint=checkpoint)
    for r in results:
        print(r.line())
    return 0 if all(r.passed for r in results) else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="blockspec", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("init", help="create a checkpoint (optionally pretraining the target)")
    p.add_argument("--config", default=None, help="JSON model config")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--corpus", default=None, help="pretrain the target on this corpus")
    p.add_argument("--pretrain-steps", type=int, default=400)
    p.add_argument("--pretrain-lr", type=float, default=3e-3)
    p.add_argument("--draft-init", choices=["copy", "random"], default="copy")
    p.add_argument("--log-every", type=int, default=0)
    p.set_defaults(func=cmd_init)

    p = sub.add_parser("gen-corpus", help="write a seeded order-2 Markov corpus")
    p.add_argument("--vocab", type=int, default=64)
    p.add_argument("--seqs", type=int, default=256)
    p.add_argument("--len", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--sharpness", type=float, default=3.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_corpus)

    p = sub.add_parser("train", help="train the draft parameters against a frozen target")
    p.add_argument("--checkpoint-in", required=True)
    p.add_argument("--checkpoint-out", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--steps", type=int, default=1000)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--decay", type=float, default=7.0)
    p.add_argument("--anchors", type=int, default=4)
    p.add_argument("--batch-seqs", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--log-every", type=int, default=50)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("decode", help="decode one prompt")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--prompt", required=True, help="space-separated token ids")
    p.add_argument("--max-tokens", type=int, default=32)
    p.add_argument("--mode", choices=["auto", "parallel", "sequential"], default="auto")
    p.add_argument("--temperature", type=float, default=0.0)
    p.add_argument("--theta", type=float, default=0.05)
    p.add_argument("--threshold", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--stop-token", type=int, default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("bench", help="batch benchmark with the analytic cost model")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--batches", default="1,2,4,8,16")
    p.add_argument("--prompt-len", type=int, default=8)
    p.add_argument("--max-tokens", type=int, default=32)
    p.add_argument("--mode", choices=["auto", "parallel", "sequential"], default="auto")
    p.add_argument("--theta", type=float, default=0.05)
    p.add_argument("--temperature", type=float, default=0.0)
    p.add_argument("--threshold", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--beta", type=float, default=200.0)
    p.add_argument("--saturation", type=float, default=64.0)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("oracle", help="run the correctness check suite")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--quick", action="store_true", help="reduced trial counts, scaled thresholds")
    p.set_defaults(func=cmd_oracle)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
