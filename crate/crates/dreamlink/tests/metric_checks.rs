//! Corpus-level check of the directional metric: on ground-truth edit pairs
//! the agreement between the image shift and the caption shift must beat a
//! shuffled-caption baseline once the embedding towers are trained.

use dreamlink::config::{ModelConfig, TrainConfig};
use dreamlink::datagen::corpus::{build_corpus, Corpus};
use dreamlink::encoders::{load_corpus_images, train_towers, Encoders};
use dreamlink::metrics::{direction_sim, mean};
use dreamlink::seeding::derive_seed;

#[test]
fn matched_caption_edits_outscore_shuffled_captions() {
    let dir = tempfile::tempdir().unwrap();
    let seed = 2424;
    build_corpus(seed, 250, 1, dir.path()).unwrap();
    let corpus = Corpus::load(dir.path()).unwrap();

    let model_cfg = ModelConfig::default();
    let mut encoders = Encoders::new(&model_cfg, derive_seed(seed, "encoders", 0));
    let images = load_corpus_images(&corpus).unwrap();
    let tower_cfg = TrainConfig {
        tower_steps: 220,
        tower_batch: 16,
        ..TrainConfig::default()
    };
    let (vision, text, _) =
        train_towers(&corpus, &images, &tower_cfg, &model_cfg, seed).unwrap();
    encoders.vision = vision;
    encoders.text = text;

    let records: Vec<_> = corpus.train_records().into_iter().take(200).collect();
    assert_eq!(records.len(), 200, "corpus too small for the baseline check");
    let mut matched = Vec::new();
    let mut shuffled = Vec::new();
    for (i, rec) in records.iter().enumerate() {
        let src = corpus.load_image(rec).unwrap();
        let edit = corpus.load_image_edit(rec).unwrap();
        matched.push(
            direction_sim(&encoders, &src, &edit, &rec.caption, &rec.caption_edit).unwrap(),
        );
        // Pair the same image edit with another record's edited caption.
        let other = records[(i + 7) % records.len()];
        shuffled.push(
            direction_sim(&encoders, &src, &edit, &rec.caption, &other.caption_edit).unwrap(),
        );
    }
    let (m, s) = (mean(&matched), mean(&shuffled));
    assert!(
        m > s,
        "matched captions should outscore shuffled ones: matched {m:.4} vs shuffled {s:.4}"
    );
    // Meaningful separation, not a statistical accident.
    assert!(
        m - s > 0.05,
        "separation too small: matched {m:.4} vs shuffled {s:.4}"
    );
}
