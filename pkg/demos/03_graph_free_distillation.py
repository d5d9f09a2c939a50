"""Distill the MUTAG teacher into a GCN-3-32 without touching real graphs.

Run 02_mutag_teacher.py first. Three sources of fake training graphs are
compared: learned structure and features, learned features on fixed random
structures, and pure noise. Pass a smaller iteration count as the first
argument for a quick look (the default schedule takes several minutes).
"""
import sys
from pathlib import Path

import numpy as np

from gfkd.data import load_tu_dataset, split_dataset
from gfkd.distill import DistillConfig, evaluate, train_student
from gfkd.generator import GenerationConfig, node_range_for, randg_baseline, run_generation
from gfkd.gnn import load_checkpoint, model_from_tag, predict

root = Path(__file__).resolve().parents[1]
iterations = int(sys.argv[1]) if len(sys.argv) > 1 else 2500

graphs, meta = load_tu_dataset(root / "data" / "MUTAG")
split = split_dataset(graphs, 0.7, seed=0)
teacher = load_checkpoint((root / "runs" / "demo" / "teacher.ckpt").read_bytes())
print("teacher test acc", round(evaluate(teacher, split.test), 3))

cfg = GenerationConfig(iterations=iterations, lr_decay_period=max(1, iterations * 2 // 5))
fakes = {
    "learned structure": run_generation(teacher, cfg, meta, len(split.train), np.random.default_rng(0)),
    "fixed structure": run_generation(teacher, GenerationConfig(**{**cfg.__dict__, "learn_structure": False}),
                                      meta, len(split.train), np.random.default_rng(0)),
    "noise": randg_baseline(meta, len(split.train), node_range_for(meta, cfg), np.random.default_rng(0)),
}

for name, fake in fakes.items():
    if fake.log:
        first, last = fake.log[0], fake.log[cfg.iterations - 1]
        print(f"\n[{name}] first batch objective {first['objective']:.2f} -> {last['objective']:.2f}"
              f"  (ce {last['ce_term']:.3f}, bn {last['bn_term']:.2f}, entropy {last['entropy_term']:.3f})")
    else:
        print(f"\n[{name}]")
    density = np.mean([g.adjacency.mean() for g in fake.graphs])
    hit = np.mean(predict(teacher, fake.graphs).argmax(1) == np.array(fake.labels))
    print(f"  edge density {density:.3f}  teacher agrees with sampled label on {hit:.0%}")
    student = model_from_tag("GCN-3-32", meta.feature_dim, meta.num_classes, np.random.default_rng(100))
    student, _ = train_student(student, teacher, fake, DistillConfig(seed=0))
    print(f"  student test acc {evaluate(student, split.test):.3f}")
