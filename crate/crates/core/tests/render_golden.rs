//! Bit-exact PPM fixtures. Regenerate after an intended renderer change with
//! `cargo test -p splatmask --test render_golden -- --ignored`.

use std::path::PathBuf;

use splatmask::camera::{default_frontal, rotate_view, Pose};
use splatmask::renderer::{render, RenderOptions};
use splatmask::scene::{synth_scene, Layout};

/// (file, seed, primitives, layout, pitch, yaw)
const CASES: [(&str, u64, usize, Layout, f64, f64); 3] = [
    ("head_s3_frontal.ppm", 3, 120, Layout::HeadLike, 0.0, 0.0),
    ("head_s3_turned.ppm", 3, 120, Layout::HeadLike, 0.25, -0.4),
    ("blob_s11_frontal.ppm", 11, 30, Layout::Blob, 0.0, 0.0),
];

fn golden_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden")
}

fn ppm(seed: u64, n: usize, layout: Layout, pitch: f64, yaw: f64) -> Vec<u8> {
    let scene = synth_scene(seed, n, layout).unwrap();
    let view = rotate_view(&default_frontal(40, 32).unwrap(), pitch, yaw);
    render(&scene, &view, &Pose::identity(), &RenderOptions::default())
        .unwrap()
        .0
        .to_ppm()
}

#[test]
fn renders_match_golden_files() {
    for (file, seed, n, layout, pitch, yaw) in CASES {
        let expected = std::fs::read(golden_dir().join(file)).unwrap_or_else(|e| panic!("{file}: {e}"));
        assert!(ppm(seed, n, layout, pitch, yaw) == expected, "{file} differs from the golden image");
    }
}

#[test]
#[ignore = "writes the golden files"]
fn regenerate_golden_files() {
    std::fs::create_dir_all(golden_dir()).unwrap();
    for (file, seed, n, layout, pitch, yaw) in CASES {
        std::fs::write(golden_dir().join(file), ppm(seed, n, layout, pitch, yaw)).unwrap();
    }
}
