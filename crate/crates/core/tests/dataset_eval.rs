//! Dataset loading and the evaluation harness on a synthetic VOC-layout tree,
//! with recorded score maps standing in for the models.

use std::path::Path;

use hiseg_core::config::PipelineConfig;
use hiseg_core::dataset::{read_index_png, write_index_png, DatasetId, DatasetSpec};
use hiseg_core::harness::{evaluate, EvalMode, EvalOptions};
use hiseg_core::pipeline::{CoarseSource, Pipeline};
use hiseg_core::replay::ReplayStore;
use hiseg_core::segment::{LabelMap, ScoreMap, TemplateSet, IGNORE};
use ndarray::{Array2, Array3};

const W: usize = 12;
const H: usize = 9;

/// Raw VOC mask: background, a block of `class`, and a 255 border.
fn raw_mask(i: usize) -> Array2<u16> {
    let class = (i % 20 + 1) as u16;
    Array2::from_shape_fn((H, W), |(y, x)| {
        if y == 0 || x == 0 {
            255
        } else if x >= 4 + i % 3 && y >= 3 {
            class
        } else if i % 2 == 1 && x < 3 && y > 5 {
            (class % 20) + 1
        } else {
            0
        }
    })
}

fn write_raw_png(path: &Path, raw: &Array2<u16>) {
    let file = std::fs::File::create(path).unwrap();
    let mut enc = png::Encoder::new(std::io::BufWriter::new(file), W as u32, H as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    let data: Vec<u8> = raw.iter().map(|&v| v as u8).collect();
    enc.write_header().unwrap().write_image_data(&data).unwrap();
}

fn make_voc(root: &Path, n: usize) {
    for d in ["JPEGImages", "SegmentationClass", "ImageSets/Segmentation"] {
        std::fs::create_dir_all(root.join(d)).unwrap();
    }
    let ids: Vec<String> = (0..n).map(|i| format!("2007_{i:06}")).collect();
    std::fs::write(root.join("ImageSets/Segmentation/val.txt"), ids.join("\n") + "\n").unwrap();
    for (i, id) in ids.iter().enumerate() {
        let img = image::RgbImage::from_fn(W as u32, H as u32, |x, y| image::Rgb([(x * 20) as u8, (y * 25) as u8, (i * 40) as u8]));
        img.save(root.join("JPEGImages").join(format!("{id}.jpg"))).unwrap();
        write_raw_png(&root.join("SegmentationClass").join(format!("{id}.png")), &raw_mask(i));
    }
}

/// Scores that reproduce the ground truth exactly: 1 for the true class,
/// 0 elsewhere (ignored pixels get class 1).
fn oracle_scores(gt: &LabelMap) -> ScoreMap {
    let cols = 21;
    let scores = Array3::from_shape_fn((H, W, cols), |(y, x, c)| {
        let g = gt.0[[y, x]];
        let g = if g == IGNORE { 1 } else { g as usize };
        if c == g && c != 0 {
            1.0
        } else {
            0.0
        }
    });
    ScoreMap::new(scores, (0..cols as u16).collect(), Some(0), true).unwrap()
}

fn replay_pipeline(store: &ReplayStore) -> Pipeline {
    let mut cfg = PipelineConfig::default();
    cfg.compensation.enabled = false;
    cfg.replay = Some(store.root().to_path_buf());
    let cats = DatasetId::Voc.categories(TemplateSet::Single).unwrap();
    Pipeline::new(cfg, cats, CoarseSource::Replay(store.clone()), None).unwrap()
}

#[test]
fn load_sample_maps_border_to_ignore_and_counts_classes() {
    let dir = tempfile::tempdir().unwrap();
    make_voc(dir.path(), 3);
    let ds = DatasetSpec::new(DatasetId::Voc, dir.path(), None).open().unwrap();
    assert_eq!(ds.len(), 3);
    let s = ds.load_sample(0).unwrap();
    assert_eq!(s.ground_truth.dim(), (H, W));
    assert_eq!((s.image.width() as usize, s.image.height() as usize), (W, H));
    let count = |v: u16| s.ground_truth.0.iter().filter(|&&x| x == v).count();
    // border row and column: 12 + 9 - 1 pixels
    assert_eq!(count(IGNORE), 20);
    // class block x in 4..12, y in 3..9
    assert_eq!(count(1), 8 * 6);
    assert_eq!(count(0), H * W - 20 - 48);

    let voc20 = DatasetSpec::new(DatasetId::Voc20, dir.path(), None).open().unwrap();
    let g = voc20.load_ground_truth(0).unwrap();
    assert_eq!(g.0.iter().filter(|&&x| x == 0).count(), 48);
    assert_eq!(g.0.iter().filter(|&&x| x == IGNORE).count(), H * W - 48);
}

#[test]
fn missing_and_corrupt_files_name_the_path() {
    let dir = tempfile::tempdir().unwrap();
    make_voc(dir.path(), 2);
    let ds = DatasetSpec::new(DatasetId::Voc, dir.path(), None).open().unwrap();
    let mask = dir.path().join("SegmentationClass/2007_000001.png");
    std::fs::write(&mask, b"not a png").unwrap();
    let err = ds.load_sample(1).unwrap_err();
    assert_eq!(err.exit_code(), 4);
    assert!(err.to_string().contains("2007_000001.png"), "{err}");
    std::fs::remove_file(dir.path().join("JPEGImages/2007_000000.jpg")).unwrap();
    let err = ds.load_sample(0).unwrap_err();
    assert!(err.to_string().contains("2007_000000.jpg"), "{err}");
    assert!(DatasetSpec::new(DatasetId::Voc, "/nonexistent", None).open().is_err());
}

#[test]
fn out_of_range_mask_values_are_data_errors() {
    let dir = tempfile::tempdir().unwrap();
    make_voc(dir.path(), 1);
    let mut raw = raw_mask(0);
    raw[[4, 4]] = 40;
    write_raw_png(&dir.path().join("SegmentationClass/2007_000000.png"), &raw);
    let ds = DatasetSpec::new(DatasetId::Voc, dir.path(), None).open().unwrap();
    assert_eq!(ds.load_ground_truth(0).unwrap_err().exit_code(), 4);
}

#[test]
fn written_label_png_reads_back() {
    let dir = tempfile::tempdir().unwrap();
    let labels = LabelMap(Array2::from_shape_fn((5, 7), |(y, x)| if x == 6 { IGNORE } else { (y * 7 + x) as u16 }));
    let p = dir.path().join("l.png");
    write_index_png(&p, &labels).unwrap();
    let raw = read_index_png(&p).unwrap();
    assert_eq!(raw.mapv(|v| if v == 255 { IGNORE } else { v }), labels.0);
}

#[test]
fn ground_truth_replay_scores_full_marks() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("voc");
    make_voc(&data, 5);
    let ds = DatasetSpec::new(DatasetId::Voc, &data, None).open().unwrap();
    let store = ReplayStore::new(dir.path().join("replay"));
    for i in 0..ds.len() {
        store.write_scores(&ds.ids[i], &oracle_scores(&ds.load_ground_truth(i).unwrap())).unwrap();
    }
    let p = replay_pipeline(&store);
    for workers in [1, 3] {
        let out = evaluate(&p, &ds, &EvalOptions { workers, ..Default::default() }).unwrap();
        assert_eq!(out.report.mean_iou, 1.0);
        assert_eq!(out.report.per_class_iou.len(), 21);
        assert_eq!(out.report.samples, 5);
        let im = out.report.image_level.as_ref().unwrap();
        assert_eq!(im.mean_ap, 1.0);
        assert_eq!(out.times.len(), 5);
    }
    let limited = evaluate(&p, &ds, &EvalOptions { limit: Some(1), ..Default::default() }).unwrap();
    assert_eq!(limited.report.samples, 1);
    assert_eq!(limited.report.mean_iou, 1.0);
}

#[test]
fn pseudo_masks_restrict_to_present_classes() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("voc");
    make_voc(&data, 5);
    let ds = DatasetSpec::new(DatasetId::Voc, &data, None).open().unwrap();
    let store = ReplayStore::new(dir.path().join("replay"));
    for i in 0..ds.len() {
        store.write_scores(&ds.ids[i], &oracle_scores(&ds.load_ground_truth(i).unwrap())).unwrap();
    }
    let p = replay_pipeline(&store);
    let masks = dir.path().join("masks");
    let opts = EvalOptions {
        mode: EvalMode::PseudoMasks,
        predictions_dir: Some(masks.clone()),
        ..Default::default()
    };
    let out = evaluate(&p, &ds, &opts).unwrap();
    assert_eq!(out.report.mean_iou, 1.0);
    assert!(out.report.image_level.is_none());

    // arbitrary scores: predictions stay within the given label sets
    let mut rng = 7u32;
    for i in 0..ds.len() {
        let s = Array3::from_shape_fn((H, W, 21), |_| {
            rng = rng.wrapping_mul(1_664_525).wrapping_add(1_013_904_223);
            (rng >> 8) as f32 / (1u32 << 24) as f32
        });
        let map = ScoreMap::new(s, (0..21).collect(), Some(0), true).unwrap();
        store.write_scores(&ds.ids[i], &map).unwrap();
    }
    evaluate(&p, &ds, &opts).unwrap();
    for (i, id) in ds.ids.iter().enumerate() {
        let pred = read_index_png(&masks.join(format!("{id}.png"))).unwrap();
        let allowed = ds.load_ground_truth(i).unwrap().present_labels();
        assert!(pred.iter().all(|v| allowed.contains(v) || *v == 0));
    }
}

#[test]
fn recorded_scores_with_wrong_columns_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("voc");
    make_voc(&data, 1);
    let ds = DatasetSpec::new(DatasetId::Voc, &data, None).open().unwrap();
    let store = ReplayStore::new(dir.path().join("replay"));
    let s = ScoreMap::new(Array3::zeros((H, W, 3)), vec![0, 1, 2], Some(0), true).unwrap();
    store.write_scores(&ds.ids[0], &s).unwrap();
    let err = evaluate(&replay_pipeline(&store), &ds, &EvalOptions::default()).unwrap_err();
    assert_eq!(err.exit_code(), 1);
}
