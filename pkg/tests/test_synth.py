import numpy as np
import pytest

from lrquant.errors import ConfigError
from lrquant.stats import expert_frequencies, kurtosis
from lrquant.synth import SynthSpec, build_manifest, generate, write_model


def test_matrix_count():
    m = build_manifest(SynthSpec(layers=2, experts=4, hidden=128, ffn=256))
    # four attention projections plus three matrices per expert, per layer
    assert len(list(m.matrices())) == 2 * (4 * 3 + 4)
    shapes = {e.name.split(".")[-1]: (e.rows, e.cols) for e in m.matrices()}
    assert shapes["w1"] == (256, 128) and shapes["w2"] == (128, 256) and shapes["q_proj"] == (128, 128)


def test_indivisible_dims():
    with pytest.raises(ConfigError):
        SynthSpec(hidden=100)
    with pytest.raises(ConfigError):
        SynthSpec(ffn=96)
    with pytest.raises(ConfigError):
        SynthSpec(attention_df=2.0)
    with pytest.raises(ConfigError):
        SynthSpec(imbalance=0.5)


def test_deterministic():
    _, a, fa = generate(SynthSpec(), 7)
    _, b, fb = generate(SynthSpec(), 7)
    assert all(a[k].data.tobytes() == b[k].data.tobytes() for k in a)
    assert fa == fb
    _, c, _ = generate(SynthSpec(), 8)
    assert any(a[k].data.tobytes() != c[k].data.tobytes() for k in a)


def test_imbalance_ratio():
    _, _, freq = generate(SynthSpec(imbalance=11.7), 0)
    for _, ratio in expert_frequencies(freq).values():
        assert ratio == pytest.approx(11.7)


def test_distribution_contrast():
    _, w, _ = generate(SynthSpec(), 0)
    attn = np.mean([kurtosis(v.data) for k, v in w.items() if ".attn." in k])
    expert = np.mean([kurtosis(v.data) for k, v in w.items() if ".experts." in k])
    assert attn > 1.0 > abs(expert)


def test_write_model(tmp_path):
    m = write_model(tmp_path, SynthSpec(layers=1, experts=2), 0)
    assert (tmp_path / "manifest.json").exists() and (tmp_path / "freq_stats.json").exists()
    assert len(list((tmp_path / "tensors").iterdir())) == len(list(m.matrices()))
