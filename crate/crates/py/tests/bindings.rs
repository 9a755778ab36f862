use pyo3::prelude::*;
use pyo3::types::{PyDict, PyModule};

fn with_module(code: &std::ffi::CStr) -> PyResult<()> {
    Python::initialize();
    Python::attach(|py| {
        let m = PyModule::new(py, "vidflow")?;
        vidflow_py::register(&m)?;
        let scope = PyDict::new(py);
        scope.set_item("vidflow", m)?;
        py.run(code, Some(&scope), None)
    })
}

#[test]
fn tensors_cross_the_boundary() {
    with_module(
        c"
t = vidflow.Tensor([0.0, 1.0, 2.0, 3.0, 4.0, 5.0], [2, 3])
assert t.shape == [2, 3]
assert t.tolist() == [0.0, 1.0, 2.0, 3.0, 4.0, 5.0]
assert t.index(1).tolist() == [3.0, 4.0, 5.0]
try:
    vidflow.Tensor([0.0], [2])
    raise AssertionError('bad shape accepted')
except ValueError:
    pass
",
    )
    .unwrap();
}

#[test]
fn metrics_and_losses_match_hand_values() {
    with_module(
        c"
a = vidflow.Tensor([0.0] * 18, [2, 3, 3])
b = vidflow.Tensor([3.0] * 9 + [4.0] * 9, [2, 3, 3])
assert abs(vidflow.epe(a, b) - 5.0) < 1e-9
img = vidflow.Tensor([0.3] * 48, [3, 4, 4])
assert abs(vidflow.psnr(img, vidflow.Tensor([0.4] * 48, [3, 4, 4])) - 20.0) < 1e-3
big = vidflow.Tensor([0.5] * 3 * 16 * 16, [3, 16, 16])
assert abs(vidflow.ssim(big, big) - 1.0) < 1e-9
assert vidflow.kl_loss(vidflow.Tensor.zeros([1, 4]), vidflow.Tensor.zeros([1, 4])) == 0.0
zero = vidflow.Tensor.zeros([2, 4, 4])
assert vidflow.warp_frame(img, zero).max_abs_diff(img) <= 1e-6
",
    )
    .unwrap();
}

#[test]
fn config_and_untrained_model() {
    with_module(
        c"
cfg = vidflow.Config()
assert 'lambda_fs' in vidflow.Config.keys()
for k, v in [('t', '2'), ('height', '32'), ('width', '32'), ('base_width', '4'),
             ('motion_dim', '16'), ('fg_motion_dim', '12'), ('content_dim', '8')]:
    cfg.set(k, v)
cfg.validate()
assert vidflow.Config.from_text(cfg.to_text()).to_text() == cfg.to_text()
s = vidflow.synth_dataset('translate-1', 1, seed=3, height=32, width=32, steps=2)[0]
assert s.frames.shape == [3, 3, 32, 32]
frame = s.frames.index(0)
model = vidflow.Model.init(cfg)
assert model.num_parameters() > 0
video = model.predict_from_frame(frame, s.label, n_samples=1, seed=1)[0]
assert all(video.index(t).max_abs_diff(frame) <= 1e-6 for t in range(3))
try:
    cfg.set('t', '0')
    cfg.validate()
    raise AssertionError('t = 0 accepted')
except ValueError:
    pass
",
    )
    .unwrap();
}
