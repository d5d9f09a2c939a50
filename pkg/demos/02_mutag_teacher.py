"""Train the GCN-5-64 teacher on MUTAG and look at its BN statistics.

The running mean/variance stored in each BN layer are the only thing the
generator knows about the real data distribution, so it is worth checking
that they describe the training graphs well.
"""
import sys
from pathlib import Path

import numpy as np

from gfkd.data import load_tu_dataset, split_dataset
from gfkd.generator import bn_regularizer
from gfkd.gnn import OptimizerConfig, accuracy, model_forward, model_from_tag, save_checkpoint, train_teacher

root = Path(__file__).resolve().parents[1]
epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 400

graphs, meta = load_tu_dataset(root / "data" / "MUTAG")
split = split_dataset(graphs, 0.7, seed=0)
print(f"{meta.name}: {len(graphs)} graphs, avg {meta.avg_node_count:.2f} nodes, "
      f"{meta.feature_dim} node labels, train/test {len(split.train)}/{len(split.test)}")

teacher = model_from_tag("GCN-5-64", meta.feature_dim, meta.num_classes, np.random.default_rng(0))
teacher, metrics = train_teacher(teacher, split, epochs, OptimizerConfig(seed=0))
for row in metrics[:: max(1, epochs // 8)] + metrics[-1:]:
    print(f"epoch {row['epoch']:>4}  loss {row['train_loss']:.4f}  test acc {row['test_acc']:.3f}")
print("train acc", round(accuracy(teacher, split.train), 3))

# the BN prior: how far are batch stats of real and of random graphs from the running stats?
real = model_forward(teacher, split.train[:32], "eval")
rng = np.random.default_rng(0)
fake = []
for g in split.train[:32]:
    a = np.triu((rng.random(g.adjacency.shape) < 0.5).astype(np.int8), 1)
    fake.append(type(g)(features=g.features, adjacency=a + a.T, label=g.label))
rand = model_forward(teacher, fake, "eval")
print("R_bn on 32 real graphs          :", round(bn_regularizer(real, teacher), 2))
print("R_bn on the same, random edges  :", round(bn_regularizer(rand, teacher), 2))

out = root / "runs" / "demo"
out.mkdir(parents=True, exist_ok=True)
(out / "teacher.ckpt").write_bytes(save_checkpoint(teacher))
print("saved", out / "teacher.ckpt")
