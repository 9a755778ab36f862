use std::collections::BTreeMap;
use std::path::Path;

use proptest::prelude::*;

use vidflow::losses;
use vidflow::synthgen::{
    generate_samples, make_dataset, render_sequence, DatasetSpec, SceneFamily, SceneObject, SceneSpec, Shape, Texture,
};

fn noise_background() -> Texture {
    Texture::Noise {
        seed: 9,
        cell: 5.0,
        lo: 0.1,
        hi: 0.9,
    }
}

fn scene(objects: Vec<SceneObject>, camera: (f64, f64), h: usize, w: usize) -> SceneSpec {
    SceneSpec {
        height: h,
        width: w,
        background: noise_background(),
        background_class: 0,
        camera_velocity: camera,
        objects,
        num_classes: 4,
        fg_classes: vec![1, 2, 3],
        max_displacement: 2.0,
    }
}

fn rect(left: f64, top: f64, w: f64, h: f64, v: (f64, f64)) -> SceneObject {
    SceneObject {
        shape: Shape::Rect {
            left,
            top,
            width: w,
            height: h,
        },
        texture: Texture::Flat([0.8, 0.2, 0.1]),
        class: 1,
        velocity: v,
    }
}

#[test]
fn trailing_edge_strip_is_occluded() {
    let (h, w) = (40, 48);
    let spec = scene(vec![rect(20.0, 10.0, 10.0, 10.0, (-1.0, 0.0))], (1.0, 0.0), h, w);
    let steps = 4;
    let s = render_sequence(&spec, steps).unwrap();

    // Hand visibility: the object covers rows 10..20 and columns
    // 20 - t..30 - t; background pixel x at time t shows world column x - t.
    let object = |x: i64, y: i64, t: i64| (10..20).contains(&y) && (20 - t..30 - t).contains(&x);
    let visible_from_t = |x: i64, y: i64, t: i64| {
        if object(x, y, t) {
            true
        } else {
            let src = x - t;
            src >= 0 && !object(src, y, 0)
        }
    };
    let plane = h * w;
    for t in 1..=steps {
        let masks = &s.occlusions.backward.data()[(t - 1) * plane..t * plane];
        for y in 0..h {
            for x in 0..w {
                let want = visible_from_t(x as i64, y as i64, t as i64);
                assert_eq!(masks[y * w + x] == 1.0, want, "t={t} x={x} y={y}");
            }
        }
        let row = &masks[15 * w..16 * w];
        let strip: Vec<usize> = (0..w).filter(|&x| x >= t && row[x] == 0.0).collect();
        assert_eq!(strip, (30 - t..30 + t).collect::<Vec<_>>());
    }
}

fn files(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in std::fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn dataset_is_byte_identical_for_a_seed() {
    let spec = DatasetSpec {
        family: SceneFamily::Multi3,
        samples: 2,
        seed: 7,
        height: 32,
        width: 32,
        steps: 2,
    };
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    make_dataset(a.path(), &spec).unwrap();
    make_dataset(b.path(), &spec).unwrap();
    let (fa, fb) = (files(a.path()), files(b.path()));
    assert!(!fa.is_empty());
    assert_eq!(fa, fb);
}

#[test]
fn translating_set_moves() {
    let spec = DatasetSpec {
        family: SceneFamily::Translate1,
        samples: 500,
        seed: 3,
        height: 32,
        width: 32,
        steps: 2,
    };
    let samples = generate_samples(&spec).unwrap();
    let mean: f64 = samples
        .iter()
        .map(|s| s.flows.backward.data().iter().map(|v| v.abs() as f64).sum::<f64>())
        .sum::<f64>()
        / (samples.len() * 2 * 2 * 32 * 32) as f64;
    assert!(mean > 0.0);
}

#[test]
fn zero_velocity_set_has_zero_flow() {
    let spec = DatasetSpec {
        family: SceneFamily::Static,
        samples: 20,
        seed: 4,
        height: 32,
        width: 32,
        steps: 3,
    };
    for s in generate_samples(&spec).unwrap() {
        assert!(s.flows.forward.data().iter().all(|&v| v == 0.0));
        assert!(s.flows.backward.data().iter().all(|&v| v == 0.0));
    }
}

fn velocity() -> impl Strategy<Value = (f64, f64)> {
    (-2i32..=2, -2i32..=2).prop_map(|(x, y)| (x as f64, y as f64))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn rigid_scenes_satisfy_the_oracles(
        objs in prop::collection::vec((2u32..20, 2u32..14, 3u32..9, 3u32..9, velocity()), 1..3),
        camera in (-1i32..=1, -1i32..=1),
    ) {
        let objects = objs
            .iter()
            .enumerate()
            .map(|(i, &(l, t, w, h, v))| SceneObject {
                texture: Texture::Flat([0.2 + 0.3 * i as f32, 0.7, 0.4]),
                class: 1 + i as u8,
                ..rect(l as f64, t as f64, w as f64, h as f64, v)
            })
            .collect();
        let spec = scene(objects, (camera.0 as f64, camera.1 as f64), 24, 32);
        let s = render_sequence(&spec, 3).unwrap();
        prop_assert!(s.frames.tensor().data().iter().all(|v| (0.0..=1.0).contains(v)));
        for m in [&s.occlusions.forward, &s.occlusions.backward] {
            prop_assert!(m.data().iter().all(|&v| v == 0.0 || v == 1.0));
        }
        // Flow per frame never exceeds the configured bound times t.
        let plane = 24 * 32;
        for t in 1..=3usize {
            let b = &s.flows.backward.data()[(t - 1) * 2 * plane..t * 2 * plane];
            prop_assert!(b.iter().all(|v| v.abs() <= 2.0 * t as f32));
        }
        let r = losses::eval::recon(&s.frames, &s.flows, &s.occlusions).unwrap();
        let c = losses::eval::consistency(&s.frames, &s.flows, &s.occlusions).unwrap();
        prop_assert!(r < 2.0 / 255.0, "recon {r}");
        prop_assert!(c < 1e-6, "consistency {c}");
    }
}
