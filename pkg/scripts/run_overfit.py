"""Overfit a 50-tuple random KG and report objective and train-set MRR.

    python scripts/run_overfit.py --model rt --steps 2000
"""

import argparse
import time

import numpy as np
import torch

from rtkge.evaluation import EvalOptions, evaluate
from rtkge.model import ModelConfig, TemporalKGE, build_context_index
from rtkge.synthetic import random_kg
from rtkge.training import NegativeSampler, TrainConfig, objective, train_loop

DIMS = {"rotate": (32, 0, 0), "de": (16, 16, 0), "rt": (16, 16, 8)}


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--model", choices=sorted(DIMS), default="rt")
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()
    torch.set_num_threads(1)

    kg = random_kg(n_entities=20, n_relations=3, n_timestamps=20, n_quads=50, seed=args.seed)
    d_s, d_t, d_r = DIMS[args.model]
    model = TemporalKGE(ModelConfig(kg.n_entities, kg.n_relations, kind=args.model, d_s=d_s, d_t=d_t, d_r=d_r),
                        seed=args.seed)
    config = TrainConfig(lr=args.lr, total_steps=args.steps, batch_size=64, neg_time_agnostic=32,
                         neg_time_dependent=8, select_best=False, seed=args.seed)
    index = build_context_index(kg.quads, kg.n_relations) if model.config.has_relative else None
    sampler = NegativeSampler(kg.entity_types, kg.quads, kg.n_relations, kg.tmin, kg.tmax, 32, 8)
    fixed = sampler.sample(kg.quads, np.random.default_rng(99))

    with torch.no_grad():
        before = objective(model, fixed, config, index, dropout=0.0)[0].item()
    t0 = time.perf_counter()
    result = train_loop(model, kg.quads, kg.entity_types, config)
    with torch.no_grad():
        after = objective(model, fixed, config, index, dropout=0.0)[0].item()
    mrr = evaluate(model, kg.entity_types, kg.quads, kg.quads, EvalOptions(rerank="filter")).mrr
    for step, loss, _ in result.log[:: max(1, len(result.log) // 10)]:
        print(f"step {step:5d}  batch loss {loss:.4f}")
    print(f"objective {before:.4f} -> {after:.4f} ({after / before:.3f}x), train MRR {mrr:.4f}, "
          f"{time.perf_counter() - t0:.1f}s")


if __name__ == "__main__":
    main()
