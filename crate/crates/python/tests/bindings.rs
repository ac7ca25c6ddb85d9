//! Loads the extension into an embedded interpreter and drives it from
//! Python, so argument conversion and error mapping are checked as a
//! Python caller sees them.

use marionette_py::marionette_py;
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn run_python(code: &std::ffi::CStr) {
    pyo3::append_to_inittab!(marionette_py);
    Python::initialize();
    Python::attach(|py| {
        let globals = PyDict::new(py);
        if let Err(e) = py.run(code, Some(&globals), None) {
            e.display(py);
            panic!("python snippet failed");
        }
    });
}

#[test]
fn bindings_behave_from_python() {
    run_python(
        cr#"
import json, os, tempfile
import marionette_py as m

def raises(exc, fn, *args):
    try:
        fn(*args)
    except exc:
        return True
    return False

plan = m.plan_windows(48, 24, 8)
assert plan["windows"] == [(0, 24), (16, 40), (24, 48)], plan["windows"]
assert all(sum(w for _, w in ws) == 1.0 for ws in plan["weights"])
assert raises(ValueError, m.plan_windows, 5, 4, 4)

s = m.Schedule('{"num_timesteps": 10}')
assert s.num_timesteps == 10 and len(s.betas()) == 10
assert s.ddim_timesteps(5) == [10, 8, 6, 4, 2]
assert raises(ValueError, m.Schedule, '{"num_timesteps": 0}')
assert raises(ValueError, m.Schedule, '{"bogus": 1}')

cfg = json.loads(m.parse_config('{"window": {"window": 6}}'))
assert cfg["window"] == {"window": 6, "overlap": 2}
assert raises(ValueError, m.parse_config, '{"stage1": {"stage": 3}}')
assert raises(OSError, m.load_config, "/nonexistent/config.json")

with tempfile.TemporaryDirectory() as tmp:
    clips = m.gen_dataset(tmp, 1, 2, 5, 32)
    f = [os.path.join(clips[0], "frames", n) for n in ("00000.png", "00001.png")]
    assert m.ssim(f[0], f[0]) == 1.0 and m.psnr(f[0], f[0]) == 100.0
    assert 0.0 < m.ssim(f[0], f[1]) <= 1.0
    report = m.evaluate(clips[0], clips[0])
    assert report["ssim"] == 1.0 and report["perceptual_dist"] is None
    assert raises(OSError, m.Checkpoint.load, os.path.join(tmp, "none.safetensors"))
    assert raises(ValueError, m.gen_dataset, tmp, 0)
    assert m.run_command(["gen-data", "--clips", "1", "--frames", "1", "--resolution", "32", "--out", os.path.join(tmp, "d")]) == 0
"#,
    );
}
