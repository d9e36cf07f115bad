//! Synthetic data generation: procedural scenes, caption/instruction
//! grammar, edit operations, region proposals, and corpus construction.

pub mod corpus;
pub mod edits;
pub mod grammar;
pub mod region;
pub mod scenes;

pub use corpus::{build_corpus, Corpus, TripletRecord};
pub use edits::{apply_edit, gen_edit, gen_instruction, AppliedEdit, EditSpec};
pub use grammar::{
    caption, encode_tokens, instruction_text, parse_caption, parse_instruction, tokenize,
    vocab_size, ParsedCaption, ParsedInstruction, MAX_TOKENS,
};
pub use region::{propose_region, ExternalRegionClient, RegionProposal};
pub use scenes::{
    render, synth_scene_spec, Background, Color, ObjectSpec, SceneSpec, Shape, Tint, BASE_SIZE,
};

use crate::grid::{FmriVector, ImageGrid, RegionMask};

/// One fully materialized training example: source image and caption, the
/// simulated brain response, an instruction, and the edited target.
#[derive(Debug, Clone)]
pub struct Triplet {
    pub index: u64,
    pub scene: SceneSpec,
    pub image: ImageGrid,
    pub caption: String,
    pub fmri_trials: Vec<FmriVector>,
    pub fmri_mean: FmriVector,
    pub instruction: String,
    pub edit: EditSpec,
    pub scene_edit: SceneSpec,
    pub image_edit: ImageGrid,
    pub caption_edit: String,
    pub region_truth: RegionMask,
}
