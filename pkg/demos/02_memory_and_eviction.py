"""Bounded memory: eviction, replay, and what eviction removes.

With more frames than memory slots, each new carrier can push out an old
one. The victim is the older member of the most cosine-similar carrier
pair, so near-duplicate moments collapse first while distinctive ones
survive. Evictions can be recorded and replayed into a second session,
which makes runs reproducible bit for bit.
"""

import numpy as np

from carrierstream import (
    EvictionReplay,
    ModelConfig,
    StreamSession,
    derive_replay,
    init_model,
    make_random_frames,
)

config = ModelConfig(
    layers=2,
    heads=2,
    d_model=32,
    ff_dim=64,
    vocab_size=64,
    max_positions=512,
    tokens_per_frame=4,
    memory_capacity=4,  # small on purpose: evictions start at frame 4
    eviction_rule="adjacent_pairs",
)
weights = init_model(config, seed=0)
SYSTEM = [1, 2]
frames = make_random_frames(10, config.tokens_per_frame, config.d_model, seed=7)

session = StreamSession(config, weights, system_tokens=SYSTEM)
for frame in frames:
    report = session.ingest_frame(frame)
    note = f" evicted frame {report.evicted}" if report.evicted is not None else ""
    print(f"ingest {report.frame_index}: bank={report.bank_size}{note}")

kept = [slot["frame_index"] for slot in session.bank.snapshot()]
print(f"surviving frames: {kept}")

# Positions are assigned at prefill and never re-packed, so the kept
# carriers show gaps where their evicted neighbors used to sit.
positions = [slot["position"] for slot in session.bank.snapshot()]
print(f"carrier positions: {positions}")

out = session.ask([5, 6], max_new=3, keep_logits=True)
print(f"answer tokens: {out.tokens}")

# Replay: capture this run's eviction schedule and force it on a second
# session. With the schedule pinned, the rerun is bit-identical.
replay = derive_replay(session)
twin = StreamSession(config, weights, system_tokens=SYSTEM, replay=replay)
for frame in frames:
    twin.ingest_frame(frame)
twin_out = twin.ask([5, 6], max_new=3, keep_logits=True)
assert twin_out.tokens == out.tokens
for a, b in zip(out.step_logits, twin_out.step_logits):
    assert np.array_equal(a, b)
print("replayed session matches the original bit for bit")

# What does eviction remove? Evict frame 2 immediately after ingesting
# frame 3, before anything else attends it. Then perturbing frame 2's
# content cannot change any later logit.
schedule = EvictionReplay(before_frame={3: (2,)})

def run(all_frames):
    s = StreamSession(config, weights, system_tokens=SYSTEM, replay=schedule)
    for f in all_frames:
        s.ingest_frame(f)
    return s.ask([5, 6], max_new=3, keep_logits=True)

base = run(frames)
frames[2].embeddings += 1.0  # stomp the evicted frame's content
perturbed = run(frames)
assert perturbed.tokens == base.tokens
for a, b in zip(base.step_logits, perturbed.step_logits):
    assert np.array_equal(a, b)
print("logits are independent of an immediately-evicted frame's content")

session.close()
twin.close()
