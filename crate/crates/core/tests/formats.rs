use std::fs;
use std::path::Path;

use tempfile::TempDir;
use topicmatch::checkpoint::{load_checkpoint, model_from_checkpoint, restore_model, save_checkpoint, CheckpointError};
use topicmatch::model::{Model, ModelConfig};
use topicmatch::nn::to_f64_vec;
use topicmatch::synth_data::{build_dataset, generate_scene_pair, ingest_image_folder, load_image_padded, load_pair, DatasetManifest, Pairing, SceneParams};
use topicmatch::topic_matcher::Variant;

fn small() -> SceneParams {
    SceneParams { height: 64, width: 64, ..SceneParams::default() }
}

#[test]
fn dataset_round_trip() {
    let dir = TempDir::new().unwrap();
    let manifest = build_dataset(2, dir.path(), &small(), 9).unwrap();
    let reread = DatasetManifest::read(dir.path()).unwrap();
    assert_eq!(reread.pairs.len(), 2);
    for id in 0..2 {
        let loaded = load_pair(&manifest, dir.path(), id).unwrap();
        let fresh = generate_scene_pair(9 + id as u64, &small()).unwrap();
        assert_eq!(loaded.gt_coarse, fresh.gt_coarse);
        assert_eq!(loaded.fundamental.matrix(), fresh.fundamental.matrix());
        assert_eq!(loaded.homography.matrix(), fresh.homography.matrix());
        let worst = loaded.image_b.pixels.iter().zip(&fresh.image_b.pixels).map(|(a, b)| (a - b).abs()).fold(0f32, f32::max);
        assert!(worst <= 1.0 / 255.0 + 1e-6, "{worst}");
    }
}

#[test]
fn ingest_pairs_and_pads_images() {
    let dir = TempDir::new().unwrap();
    for (i, (w, h)) in [(70u32, 70u32), (64, 64), (64, 72)].into_iter().enumerate() {
        image::GrayImage::from_pixel(w, h, image::Luma([120])).save(dir.path().join(format!("img{i}.png"))).unwrap();
    }
    assert_eq!(ingest_image_folder(dir.path(), Pairing::Sequential).unwrap().pairs.len(), 2);
    let all = ingest_image_folder(dir.path(), Pairing::AllPairs).unwrap();
    assert_eq!(all.pairs.len(), 3);
    let first = &all.pairs[0];
    let original = first.original_a.unwrap();
    assert_eq!((original.height, original.width), (70, 70));
    let (img, dims) = load_image_padded(Path::new(&first.image_a)).unwrap();
    assert_eq!((img.height, img.width), (72, 72));
    assert_eq!(dims, original);
}

#[test]
fn checkpoint_round_trip_and_integrity() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("m.ckpt");
    let model = Model::new(ModelConfig::tiny(Variant::Plus), 3).unwrap();
    save_checkpoint(&path, &model, None, 12).unwrap();
    let (loaded, state) = model_from_checkpoint(&path).unwrap();
    assert_eq!(state.header.step, 12);
    for (name, v) in model.store.params() {
        let got = to_f64_vec(loaded.store.params()[name].as_tensor()).unwrap();
        assert_eq!(to_f64_vec(v.as_tensor()).unwrap(), got, "{name}");
    }

    let bytes = fs::read(&path).unwrap();
    fs::write(&path, &bytes[..bytes.len() - 100]).unwrap();
    assert!(load_checkpoint(&path).is_err());

    let mut wide = ModelConfig::tiny(Variant::Plus);
    wide.backbone.stages[2] = 48;
    let other = Model::new(wide, 3).unwrap();
    fs::write(&path, &bytes).unwrap();
    let err = restore_model(&other, &load_checkpoint(&path).unwrap(), false).unwrap_err();
    assert!(matches!(err, CheckpointError::ConfigHashMismatch { .. }), "{err}");
}
