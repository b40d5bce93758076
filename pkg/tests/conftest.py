"""Session fixtures shared by the acceptance tests.

The benchmark datasets and checkpoints are expensive (about half a
minute for five training seeds), so they are built once per session and
only when a test actually asks for them.
"""
import pytest

from vwseg import dataio, encoder, metatrain, synth

# frozen benchmark: 2 two-part objects per 24x24 video, 12 frames
BENCH = dict(resolution=(24, 24), num_frames=12, parts_per_object=2,
             num_objects=2, part_radius=2.0, velocity=0.8, rotation=0.1,
             frame_noise=0.05)
# appearance drift, single object so colors never swap identities
DRIFT = dict(BENCH, num_objects=1, part_radius=2.5, velocity=0.5,
             num_frames=24, drift_rate=0.012)
# near-identical part colors: fine words straddle the parts
PARTS = dict(BENCH, num_objects=1, part_radius=3.5, rotation=0.2,
             velocity=0.5, hue_span=0.14)

TRAIN_SEED, TEST_SEED, DRIFT_SEED, PARTS_SEED = 100, 900, 950, 970
BENCH_EPISODES = 300


@pytest.fixture(scope="session")
def bench_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("bench")
    synth.generate_dataset(root / "train", synth.SynthConfig(**BENCH, seed=TRAIN_SEED), 20)
    synth.generate_dataset(root / "test", synth.SynthConfig(**BENCH, seed=TEST_SEED), 5)
    synth.generate_dataset(root / "drift", synth.SynthConfig(**DRIFT, seed=DRIFT_SEED), 5)
    synth.generate_dataset(root / "parts", synth.SynthConfig(**PARTS, seed=PARTS_SEED), 10)

    def load(sub, parts=False):
        return [(r.name, dataio.load_video(r, with_parts=parts))
                for r in dataio.scan_dataset(root / sub)]

    return {"root": root, "train": load("train"), "test": load("test"),
            "drift": load("drift"), "parts": load("parts", parts=True)}


@pytest.fixture(scope="session")
def bench_checkpoints(bench_data):
    videos = [v for _, v in bench_data["train"]]
    out = []
    for seed in range(5):
        cfg = metatrain.TrainConfig(episodes=BENCH_EPISODES, seed=seed)
        params, _ = metatrain.meta_train(videos, cfg)
        out.append(params)
    return out
