"""Train on the synthetic recall task, then measure what memory buys.

The task: every frame shows one symbol per token row, and a question
names a frame by index; the right answer is that frame's first-row
symbol. The only way to answer better than chance after the raw rows
are gone is to route the information through the carriers.

Stage 1 trains the adapters and the symbol table on carrier-only
sequences (the backbone is frozen). Stage 2 flips that: adapters
freeze, backbone trains on full frame layouts. Afterwards, recall is
evaluated through the real streaming engine, including the ablations.

Takes a minute or two on a laptop-class CPU.
"""

from carrierstream import (
    ModelConfig,
    TaskSpec,
    TrainConfig,
    evaluate_recall,
    grad_check,
    init_model,
    train_stage1,
    train_stage2,
)

config = ModelConfig(
    layers=2,
    heads=4,
    d_model=64,
    ff_dim=128,
    vocab_size=32,
    max_positions=96,
    tokens_per_frame=4,
    memory_capacity=16,
    adapter_rank=4,
)
task = TaskSpec(
    frames_per_stream=8,
    alphabet=16,
    questions_per_stream=8,
    noise_scale=0.05,
)

weights = init_model(config, seed=0)

# Sanity first: the analytic gradients should match finite differences.
report = grad_check(weights, task, n_coords=40, seed=0)
print(
    f"grad check: {report['coords_checked']} coords, "
    f"max rel err {report['max_rel_err']:.2e}"
)

stage1 = TrainConfig(stage=1, steps=800, batch_size=16, lr=3e-3, seed=0, target_loss=0.05)
weights, stub, metrics = train_stage1(weights, task, stage1)
print(f"stage 1 done at step {metrics[-1]['step']}, loss {metrics[-1]['loss']:.3f}")

recall_s1 = evaluate_recall(weights, stub, task, config, streams=20, seed=99)
print(f"recall after stage 1: {recall_s1:.2f} (chance is {1 / task.alphabet:.3f})")

stage2 = TrainConfig(stage=2, steps=2000, batch_size=16, lr=3e-3, beta2=0.95, seed=0, target_loss=0.02)
weights, stub, metrics = train_stage2(weights, task, stage2, stub)
print(f"stage 2 done at step {metrics[-1]['step']}, loss {metrics[-1]['loss']:.3f}")

recall_full = evaluate_recall(weights, stub, task, config, streams=20, seed=99)
print(f"recall after stage 2: {recall_full:.2f}")

# Ablations, evaluated with the same trained weights. Mean pooling is
# permutation-invariant, so a carrier K/V derived from the embedding
# alone cannot say which row held which symbol; recall should crater.
emb_only = ModelConfig.from_dict({**config.to_dict(), "carrier_kv_mode": "embedding_only"})
last_tok = ModelConfig.from_dict({**config.to_dict(), "carrier_mode": "last_token"})
recall_emb = evaluate_recall(weights, stub, task, emb_only, streams=20, seed=99)
recall_last = evaluate_recall(weights, stub, task, last_tok, streams=20, seed=99)
print(f"ablation, carrier K/V from embedding only: {recall_emb:.2f}")
print(f"ablation, carrier = last row instead of mean: {recall_last:.2f}")

assert recall_full >= recall_emb
print("full mechanism beats (or ties) the embedding-only ablation")
