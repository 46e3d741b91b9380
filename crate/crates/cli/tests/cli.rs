//! End-to-end runs of the `hiseg` binary on the toy backbone and on
//! recorded score maps.

mod common;

use std::path::Path;

use common::*;
use hiseg_core::attention::{AttentionStack, SquareMap, StackAxis};
use hiseg_core::diffusion::SdAttention;
use hiseg_core::fixture::Fixture;
use hiseg_core::replay::{sd_attention_from_fixture, ReplayStore};
use hiseg_core::segment::ScoreMap;
use ndarray::Array3;

const TOY: &[&str] = &["--backbone", "toy", "--no-compensation", "--set", "input_short_side=8"];

fn write_image(path: &Path, w: u32, h: u32) {
    image::RgbImage::from_fn(w, h, |x, y| image::Rgb([(x * 13 % 256) as u8, (y * 7 % 256) as u8, ((x + y) * 5 % 256) as u8]))
        .save(path)
        .unwrap();
}

fn args<'a>(base: &[&'a str], extra: &[&'a str]) -> Vec<&'a str> {
    base.iter().chain(extra).copied().collect()
}

fn metrics(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("metrics.json")).unwrap()).unwrap()
}

#[test]
fn single_category_without_background_labels_everything() {
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("pic.png");
    write_image(&img, 12, 9);
    let out = dir.path().join("out");
    let stdout = ok(&args(TOY, &["segment", s(&img), "-c", "cat", "--no-background", "--out", s(&out)]));
    assert!(stdout.contains("pic.png"), "{stdout}");
    let labels = read_labels(&out.join("pic.png"));
    assert_eq!(labels.dim(), (9, 12));
    assert!(labels.iter().all(|&l| l == 0));
    assert!(out.join("pic_overlay.png").is_file());
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("pic.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "segment");
}

#[test]
fn same_seed_gives_identical_label_images() {
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("pic.png");
    write_image(&img, 16, 12);
    let run = |name: &str| {
        let out = dir.path().join(name);
        ok(&args(TOY, &["segment", s(&img), "-c", "cat", "-c", "dog,puppy", "-c", "sky", "--seed", "3", "--out", s(&out)]));
        std::fs::read(out.join("pic.png")).unwrap()
    };
    assert_eq!(run("a"), run("b"));
}

#[test]
fn identity_attention_replay_matches_no_compensation() {
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("sq.png");
    write_image(&img, 4, 4);
    let store = ReplayStore::new(dir.path().join("replay"));
    let scores = Array3::from_shape_fn((4, 4, 2), |(y, x, c)| if (x + y + c) % 2 == 0 { 0.9 } else { 0.1 });
    store.write_scores("sq", &ScoreMap::new(scores, vec![1, 2], None, true).unwrap()).unwrap();
    let identity = AttentionStack::new(vec![SquareMap::identity(16); 3], StackAxis::Heads).unwrap();
    store.write_sd_attention("sq", &SdAttention::new(identity).unwrap()).unwrap();

    let run = |name: &str, comp: bool| {
        let out = dir.path().join(name);
        let mut a = vec!["segment", s(&img), "-c", "a", "-c", "b", "--replay", s(store.root()), "--out", s(&out)];
        if !comp {
            a.push("--no-compensation");
        }
        ok(&a);
        std::fs::read(out.join("sq.png")).unwrap()
    };
    assert_eq!(run("on", true), run("off", false));
}

#[test]
fn saved_scores_replay_to_the_same_labels() {
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("pic.png");
    write_image(&img, 16, 12);
    let live = dir.path().join("live");
    ok(&args(TOY, &["segment", s(&img), "-c", "cat", "-c", "dog", "--save-scores", "--out", s(&live)]));
    let replayed = dir.path().join("replayed");
    let root = live.join("replay");
    ok(&["segment", s(&img), "-c", "cat", "-c", "dog", "--no-compensation", "--replay", s(&root), "--out", s(&replayed)]);
    assert_eq!(std::fs::read(live.join("pic.png")).unwrap(), std::fs::read(replayed.join("pic.png")).unwrap());
}

#[test]
fn eval_with_oracle_scores_is_perfect_and_manifest_reruns_match() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("voc");
    make_voc(&data, 3, "val");
    let store = oracle_store(&dir.path().join("replay"), 3);
    let out = dir.path().join("first");
    let stdout = ok(&[
        "eval", "--dataset", "voc", "--data-root", s(&data), "--replay", s(store.root()), "--no-compensation",
        "--limit", "1", "--out", s(&out),
    ]);
    assert!(stdout.contains("miou = 100.00"), "{stdout}");
    let m = metrics(&out);
    assert_eq!(m["mean_iou"], 1.0);
    assert_eq!(m["samples"], 1);
    assert_eq!(m["per_class_iou"].as_array().unwrap().len(), 21);
    assert!(out.join("metrics.txt").is_file());

    let again = dir.path().join("again");
    ok(&["eval", "--manifest", s(&out.join("manifest.json")), "--out", s(&again)]);
    assert_eq!(
        std::fs::read(out.join("metrics.json")).unwrap(),
        std::fs::read(again.join("metrics.json")).unwrap()
    );
}

#[test]
fn pseudo_masks_use_only_present_classes() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("voc");
    make_voc(&data, 5, "train");
    let store = oracle_store(&dir.path().join("replay"), 5);
    let out = dir.path().join("out");
    ok(&[
        "pseudo-masks", "--dataset", "voc", "--data-root", s(&data), "--replay", s(store.root()), "--no-compensation",
        "--out", s(&out),
    ]);
    assert_eq!(metrics(&out)["mean_iou"], 1.0);
    for i in 0..5 {
        let raw = raw_mask(i);
        let allowed = present(&raw);
        let mask = read_labels(&out.join("masks").join(format!("{}.png", id(i))));
        assert_eq!(mask.dim(), (H, W));
        for &l in mask.iter() {
            assert!(l == 0 || allowed.contains(&l), "image {i}: label {l} not in {allowed:?}");
        }
        if i % 2 == 0 {
            // one foreground class: only it and background
            assert_eq!(allowed.len(), 2);
            let mut got: Vec<u16> = mask.iter().copied().collect();
            got.sort_unstable();
            got.dedup();
            assert!(got.iter().all(|l| allowed.contains(l)));
        }
    }
}

#[test]
fn layer_trace_dump_writes_one_fixture_per_early_layer() {
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("pic.png");
    write_image(&img, 8, 8);
    let out = dir.path().join("out");
    let stdout = ok(&args(TOY, &["dump", "layer_trace", s(&img), "--point", "1,1", "--point", "7,7", "--out", s(&out)]));
    let base = out.join("layer_trace/pic");
    let fixtures: Vec<_> = std::fs::read_dir(&base)
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.path().extension().is_some_and(|x| x == "safetensors"))
        .collect();
    // tiny toy encoder: depth 2, one early layer
    assert_eq!(fixtures.len(), 1);
    assert!(stdout.contains("layer_01.safetensors"), "{stdout}");
    assert!(base.join("heatmaps/layer_01_p0.png").is_file());
    assert!(base.join("heatmaps/layer_01_p1.png").is_file());
    assert!(base.join("manifest.json").is_file());
}

#[test]
fn sd_attention_dump_round_trips_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("pic.png");
    write_image(&img, 8, 8);
    let store = ReplayStore::new(dir.path().join("replay"));
    let maps: Vec<SquareMap> = (0..2)
        .map(|h| {
            let m = ndarray::Array2::from_shape_fn((4, 4), |(r, c)| ((r + c + h) % 4 + 1) as f32);
            let sums = m.sum_axis(ndarray::Axis(1));
            SquareMap::stochastic(&m / &sums.insert_axis(ndarray::Axis(1))).unwrap()
        })
        .collect();
    let att = SdAttention::new(AttentionStack::new(maps, StackAxis::Heads).unwrap()).unwrap();
    store.write_sd_attention("pic", &att).unwrap();
    let out = dir.path().join("out");
    ok(&["dump", "sd_attention", s(&img), "--replay", s(store.root()), "--out", s(&out)]);
    let base = out.join("sd_attention/pic");
    let back = sd_attention_from_fixture(&Fixture::load(&base.join("sd_attention.safetensors")).unwrap()).unwrap();
    for (a, b) in back.stack.maps().iter().zip(att.stack.maps()) {
        assert!(a.is_stochastic());
        let bits = |m: &SquareMap| m.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(a), bits(b));
    }
    assert!(base.join("heatmaps/mean_p0.png").is_file());
    assert!(base.join("heatmaps/head01_p0.png").is_file());
}

#[test]
fn similarity_dump_writes_a_heatmap_per_column() {
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("pic.png");
    write_image(&img, 8, 8);
    let out = dir.path().join("out");
    ok(&args(TOY, &["dump", "similarity", s(&img), "-c", "cat", "-c", "potted plant", "--out", s(&out)]));
    let base = out.join("similarity/pic");
    assert!(base.join("similarity.safetensors").is_file());
    let heat: Vec<String> = std::fs::read_dir(base.join("heatmaps"))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    assert!(heat.iter().any(|n| n.ends_with("_cat.png")), "{heat:?}");
    assert!(heat.iter().any(|n| n.ends_with("_potted_plant.png")), "{heat:?}");
}

fn code(out: &std::process::Output) -> Option<i32> {
    out.status.code()
}

#[test]
fn exit_codes_follow_the_error_kind() {
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("pic.png");
    write_image(&img, 8, 8);
    let out = dir.path().join("out");
    let empty = dir.path().join("weights");
    std::fs::create_dir_all(&empty).unwrap();

    let r = hiseg_env(
        &["segment", s(&img), "-c", "cat", "--backbone", "vit_b_16", "--no-compensation", "--out", s(&out)],
        &[("HISEG_WEIGHTS", &empty)],
    );
    assert_eq!(code(&r), Some(3), "{}", String::from_utf8_lossy(&r.stderr));

    let r = hiseg(&args(TOY, &["segment", s(&img), "-c", "cat", "--set", "no_such_key=1", "--out", s(&out)]));
    assert_eq!(code(&r), Some(2), "{}", String::from_utf8_lossy(&r.stderr));

    let missing = dir.path().join("nope.png");
    let r = hiseg(&args(TOY, &["segment", s(&missing), "-c", "cat", "--out", s(&out)]));
    assert_eq!(code(&r), Some(4), "{}", String::from_utf8_lossy(&r.stderr));

    let r = hiseg(&args(TOY, &["eval", "--dataset", "voc", "--data-root", s(&dir.path().join("no_voc")), "--out", s(&out)]));
    assert_eq!(code(&r), Some(4), "{}", String::from_utf8_lossy(&r.stderr));

    let r = hiseg(&["segment", s(&img), "-c", "cat", "--backbone", "vit_z_99", "--no-compensation", "--out", s(&out)]);
    assert_eq!(code(&r), Some(2), "{}", String::from_utf8_lossy(&r.stderr));

    let r = hiseg_env(&["fetch-weights", "not_a_model"], &[("HISEG_WEIGHTS", &empty)]);
    assert_eq!(code(&r), Some(2), "{}", String::from_utf8_lossy(&r.stderr));

    let r = hiseg(&["segment", s(&img), "-c", "cat", "--backbone", "toy", "--out", s(&out)]);
    assert_eq!(code(&r), Some(2), "toy backbone without a diffusion model");
    assert!(String::from_utf8_lossy(&r.stderr).starts_with("hiseg: "));
}
