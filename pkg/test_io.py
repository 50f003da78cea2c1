"""
Test script for checkpoints, params files, reports and SVG plots.
"""
import json

import numpy as np
import pytest

from app.core.diffusion import LatentDataset, train_diffusion
from app.core.exceptions import CheckpointError, MetricError, ParamsError
from app.core.funphase import init_weights, train
from app.schemas.config import (
    DiffusionConfig, GraphPEConfig, ModelConfig, OptimizerConfig, TemporalPEConfig, TrainConfig,
)
from app.schemas.motion import SkeletonSpec
from app.schemas.phase import PeriodicParams
from app.schemas.report import MetricReport
from app.services.checkpoint import (
    Checkpoint, load_autoencoder, load_denoiser, read_checkpoint, save_autoencoder, save_denoiser,
    write_checkpoint,
)
from app.services.params_io import params_from_csv, params_to_csv, read_params, write_params
from app.services.reports import read_training_log, report_from_csv, write_report, write_training_log
from app.services.svg import phase_plot_svg
from app.services.synth import synth_motion


def _model_config():
    return ModelConfig(
        channels=4, d_latent=8, joint_latents=4, joint_embed=8, joint_blocks=1,
        root_latents=2, root_embed=8, root_blocks=1, decoder_blocks=1, heads=2, mlp_ratio=2,
        temporal_pe=TemporalPEConfig(k=2, f_min=0.5, f_max=8.0), graph_pe=GraphPEConfig(dim=2),
        window_frames=12, seed=3,
    )


def _diffusion_config():
    return DiffusionConfig(
        timesteps=20, sample_steps=5, embed=8, blocks=1, heads=2, num_classes=2, keyframes=3, seed=2,
        train=TrainConfig(steps=2, batch_size=4, seed=1, log_every=1, optimizer=OptimizerConfig(lr=1e-2)),
    )


def _params():
    rows = np.array([[0.1, 1.5, 0.3333333333333333, -0.2], [0.0, 0.0, 2.0, 1e-17]])
    return PeriodicParams.from_array(rows, f_max=2.5, window_sec=0.2)


# ============================================================================
# Checkpoints
# ============================================================================

def test_autoencoder_checkpoint_round_trip(tmp_path):
    config = _model_config()
    weights = init_weights(config)
    path = str(tmp_path / "ae.ckpt")
    save_autoencoder(path, weights, config, step=7)
    loaded, loaded_config, state, step = load_autoencoder(path)
    assert loaded_config == config
    assert state is None
    assert step == 7
    for name, value in weights.arrays().items():
        np.testing.assert_array_equal(loaded[name].data, value)


def test_autoencoder_checkpoint_keeps_optimizer_state(tmp_path):
    config = _model_config()
    clips = [synth_motion(c, SkeletonSpec(joints=4), frames=12, seed=c)[1] for c in (0, 1)]
    result = train(clips, config, TrainConfig(steps=1, batch_size=2, seed=5, optimizer=OptimizerConfig(lr=1e-3)))
    path = str(tmp_path / "ae.ckpt")
    save_autoencoder(path, result.weights, config, result.optimizer_state, result.step)
    _, _, state, step = load_autoencoder(path)
    assert step == 1
    assert state.step == result.optimizer_state.step
    assert state.m.keys() == result.optimizer_state.m.keys()
    for name, value in result.optimizer_state.v.items():
        np.testing.assert_array_equal(state.v[name], value)


def test_denoiser_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    dataset = LatentDataset(values=rng.standard_normal((6, 3, 4)), labels=np.array([0, 1, 0, 1, -1, 0]),
                            context=None, f_max=2.5, window_sec=0.2)
    result = train_diffusion(dataset, _diffusion_config())
    path = str(tmp_path / "dm.ckpt")
    save_denoiser(path, result.denoiser, result.optimizer_state, result.step)
    denoiser, state, step = load_denoiser(path)
    assert step == 2
    assert state.step == result.optimizer_state.step
    assert denoiser.channels == 3
    assert denoiser.f_max == 2.5 and denoiser.window_sec == 0.2
    assert denoiser.config == result.denoiser.config
    np.testing.assert_array_equal(denoiser.stats.mean, result.denoiser.stats.mean)
    np.testing.assert_array_equal(denoiser.stats.std, result.denoiser.stats.std)
    for name, value in result.denoiser.weights.arrays().items():
        np.testing.assert_array_equal(denoiser.weights[name].data, value)


def test_wrong_checkpoint_kind(tmp_path):
    config = _model_config()
    path = str(tmp_path / "ae.ckpt")
    save_autoencoder(path, init_weights(config), config)
    with pytest.raises(CheckpointError) as info:
        load_denoiser(path)
    assert info.value.code == "E_CHECKPOINT"


def test_flipped_payload_byte_is_detected(tmp_path):
    path = tmp_path / "raw.ckpt"
    write_checkpoint(str(path), Checkpoint(kind="autoencoder", config={}, arrays={"x": np.arange(4.0)}))
    assert read_checkpoint(str(path)).arrays["x"].tolist() == [0.0, 1.0, 2.0, 3.0]
    raw = bytearray(path.read_bytes())
    raw[-1] ^= 0xFF
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError) as info:
        read_checkpoint(str(path))
    assert "checksum" in info.value.message


@pytest.mark.parametrize("content", [b"", b"PHSK", b"NOPE" + bytes(12), b"PHSK\x09\x00\x00\x00" + bytes(8)])
def test_unreadable_checkpoints(tmp_path, content):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(content)
    with pytest.raises(CheckpointError):
        read_checkpoint(str(path))


def test_missing_checkpoint(tmp_path):
    with pytest.raises(CheckpointError):
        load_autoencoder(str(tmp_path / "nope.ckpt"))


def test_tensor_table_must_match_config(tmp_path):
    config = _model_config()
    path = str(tmp_path / "ae.ckpt")
    write_checkpoint(path, Checkpoint(kind="autoencoder", config=config.model_dump(mode="json"),
                                      arrays={"w.extra": np.zeros(2)}))
    with pytest.raises(CheckpointError):
        load_autoencoder(path)


# ============================================================================
# Params files
# ============================================================================

@pytest.mark.parametrize("fmt", ["csv", "bin"])
def test_params_files_are_exact(tmp_path, fmt):
    params = _params()
    path = str(tmp_path / f"params.{fmt}")
    write_params(path, params, fmt)
    back = read_params(path)
    np.testing.assert_array_equal(back.to_array(), params.to_array())
    assert back.f_max == params.f_max
    assert back.window_sec == params.window_sec


def test_params_csv_layout():
    lines = params_to_csv(_params()).splitlines()
    assert lines[0] == "# phasekit-params f_max=2.5 window_sec=0.2"
    assert lines[1] == "channel,s,a,f,b"
    assert lines[2].startswith("0,0.1,1.5,")
    assert len(lines) == 4


@pytest.mark.parametrize("text", [
    "channel,s,a,f,b\n0,0.1,1.0,1.0,0.0\n",
    "# phasekit-params f_max=2.0 window_sec=1.0\nchannel,s,a,f,b\n",
    "# phasekit-params f_max=2.0 window_sec=1.0\nchannel,s,a,f,b\n0,0.1,1.0,1.0\n",
    "# phasekit-params f_max=2.0\nchannel,s,a,f,b\n0,0.1,1.0,1.0,0.0\n",
    "# phasekit-params f_max=2.0 window_sec=1.0\nchannel,s,a,f,b\n0,1.5,1.0,1.0,0.0\n",
    "# phasekit-params f_max=2.0 window_sec=1.0\nchannel,s,a,f,b\n0,0.1,1.0,3.0,0.0\n",
])
def test_bad_params_csv(text):
    with pytest.raises(ParamsError):
        params_from_csv(text)


def test_params_file_errors(tmp_path):
    with pytest.raises(ParamsError):
        read_params(str(tmp_path / "missing.csv"))
    with pytest.raises(ParamsError):
        write_params(str(tmp_path / "p.npz"), _params(), "npz")
    truncated = tmp_path / "short.bin"
    write_params(str(truncated), _params(), "bin")
    truncated.write_bytes(truncated.read_bytes()[:-8])
    with pytest.raises(ParamsError):
        read_params(str(truncated))


# ============================================================================
# Reports and logs
# ============================================================================

def test_report_files(tmp_path):
    report = MetricReport().add("npss", 0.125, "", ["spectral", "proxy"]).add("position_error", 1.0 / 3.0, "cm")
    paths = write_report(str(tmp_path / "eval"), report)
    assert paths == [str(tmp_path / "eval.csv"), str(tmp_path / "eval.json")]
    back = report_from_csv((tmp_path / "eval.csv").read_text(encoding="utf-8"))
    assert back.model_dump() == report.model_dump()
    data = json.loads((tmp_path / "eval.json").read_text(encoding="utf-8"))
    assert data["metrics"]["position_error"]["units"] == "cm"


def test_report_csv_needs_header():
    with pytest.raises(MetricError):
        report_from_csv("name,value\nnpss,0.1\n")


def test_training_log_round_trip(tmp_path):
    path = str(tmp_path / "log.csv")
    rows = [{"step": 0, "loss": 0.5, "lr": 1e-4}, {"step": 1, "loss": 0.25, "lr": 2e-4}]
    write_training_log(path, rows)
    assert read_training_log(path) == [{"step": 0.0, "loss": 0.5, "lr": 1e-4}, {"step": 1.0, "loss": 0.25, "lr": 2e-4}]
    write_training_log(path, [])
    assert read_training_log(path) == []


# ============================================================================
# SVG
# ============================================================================

def test_phase_plot_panels():
    t = np.linspace(0, 2 * np.pi, 20)
    flat = phase_plot_svg(np.stack([np.cos(t), np.sin(t)], axis=1), [0.6, 0.4])
    assert flat.count('id="panel-') == 1
    assert "<svg" in flat
    solid = phase_plot_svg(np.stack([np.cos(t), np.sin(t), t], axis=1), [0.5, 0.3, 0.2], title="walk <&> run")
    assert solid.count('id="panel-') == 3
    assert "walk &lt;&amp;&gt; run" in solid
    assert "explained variance:" in solid


def test_phase_plot_is_byte_stable():
    t = np.linspace(0, 2 * np.pi, 20)
    points = np.stack([np.cos(t), np.sin(t)], axis=1)
    first = phase_plot_svg(points, [0.6, 0.4], title="walk")
    assert phase_plot_svg(points, [0.6, 0.4], title="walk") == first
    assert "<dc:date>" not in first


def test_phase_plot_rejects_other_shapes():
    with pytest.raises(MetricError):
        phase_plot_svg(np.zeros((5, 4)), [0.25] * 4)
    with pytest.raises(MetricError):
        phase_plot_svg(np.zeros(5), [1.0])
