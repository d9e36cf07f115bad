//! Edit operations on scenes: sampling a valid instruction for a scene and
//! applying it by re-rendering the edited scene description.
//!
//! `apply_edit` is pure: the edited image is the renderer applied to the
//! edited scene, and the ground-truth changed region comes from object
//! coverage geometry, so locality properties hold by construction.

use super::grammar::{caption, instruction_text, ParsedInstruction};
use super::scenes::{
    colors_for_background, full_coverage_mask, object_mask, place_object, render, synth_scene_spec,
    Background, Color, ObjectSpec, SceneSpec, Shape, Tint, ALL_BACKGROUNDS, ALL_SHAPES, ALL_TINTS,
    BASE_SIZE,
};
use crate::error::{Error, Result};
use crate::grid::{ImageGrid, RegionMask};
use crate::seeding::rng_for;
use ndarray::{ArrayD, IxDyn};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// A fully specified edit, serializable into corpus manifests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum EditSpec {
    Recolor { shape: Shape, to: Color },
    BackgroundSwap { to: Background },
    Remove { shape: Shape },
    Add { object: ObjectSpec },
    StyleTint { tint: Tint },
}

impl EditSpec {
    /// Short operation name, e.g. for reports.
    pub fn op_name(&self) -> &'static str {
        match self {
            EditSpec::Recolor { .. } => "recolor",
            EditSpec::BackgroundSwap { .. } => "background_swap",
            EditSpec::Remove { .. } => "remove",
            EditSpec::Add { .. } => "add",
            EditSpec::StyleTint { .. } => "style_tint",
        }
    }

    /// The instruction text commanding this edit.
    pub fn instruction(&self) -> String {
        instruction_text(&match self {
            EditSpec::Recolor { shape, to } => ParsedInstruction::Recolor {
                shape: *shape,
                color: *to,
            },
            EditSpec::BackgroundSwap { to } => ParsedInstruction::BackgroundSwap { background: *to },
            EditSpec::Remove { shape } => ParsedInstruction::Remove { shape: *shape },
            EditSpec::Add { object } => ParsedInstruction::Add {
                color: object.color,
                shape: object.shape,
            },
            EditSpec::StyleTint { tint } => ParsedInstruction::StyleTint { tint: *tint },
        })
    }
}

fn find_object(scene: &SceneSpec, shape: Shape) -> Option<usize> {
    scene.objects.iter().position(|o| o.shape == shape)
}

/// Sample one valid edit for a scene, uniformly over the operations that
/// apply. Fails only for scenes with nothing editable (no objects).
pub fn gen_edit(scene: &SceneSpec, rng: &mut ChaCha8Rng) -> Result<EditSpec> {
    if scene.objects.is_empty() {
        return Err(Error::Validation(
            "scene has no objects; no edit applies".to_string(),
        ));
    }
    let mut candidates: Vec<&str> = vec!["recolor", "background_swap"];
    if scene.objects.len() >= 2 {
        candidates.push("remove");
    }
    if scene.objects.len() < 3 {
        candidates.push("add");
    }
    if scene.tint.is_none() {
        candidates.push("style_tint");
    }
    // Try operations in shuffled order so placement failure for `add`
    // falls through deterministically instead of erroring.
    candidates.shuffle(rng);
    for op in candidates {
        match op {
            "recolor" => {
                let target = scene.objects.choose(rng).expect("non-empty");
                let used: Vec<Color> = scene.objects.iter().map(|o| o.color).collect();
                let mut options: Vec<Color> = colors_for_background(scene.background)
                    .into_iter()
                    .filter(|c| !used.contains(c))
                    .collect();
                if options.is_empty() {
                    continue;
                }
                options.shuffle(rng);
                return Ok(EditSpec::Recolor {
                    shape: target.shape,
                    to: options[0],
                });
            }
            "background_swap" => {
                let used: Vec<Color> = scene.objects.iter().map(|o| o.color).collect();
                let mut options: Vec<Background> = ALL_BACKGROUNDS
                    .iter()
                    .copied()
                    .filter(|b| {
                        *b != scene.background
                            && used
                                .iter()
                                .all(|c| colors_for_background(*b).contains(c))
                    })
                    .collect();
                if options.is_empty() {
                    continue;
                }
                options.shuffle(rng);
                return Ok(EditSpec::BackgroundSwap { to: options[0] });
            }
            "remove" => {
                let target = scene.objects.choose(rng).expect("len >= 2");
                return Ok(EditSpec::Remove {
                    shape: target.shape,
                });
            }
            "add" => {
                let used_shapes: Vec<Shape> = scene.objects.iter().map(|o| o.shape).collect();
                let used_colors: Vec<Color> = scene.objects.iter().map(|o| o.color).collect();
                let mut shapes: Vec<Shape> = ALL_SHAPES
                    .iter()
                    .copied()
                    .filter(|s| !used_shapes.contains(s))
                    .collect();
                let mut colors: Vec<Color> = colors_for_background(scene.background)
                    .into_iter()
                    .filter(|c| !used_colors.contains(c))
                    .collect();
                if shapes.is_empty() || colors.is_empty() {
                    continue;
                }
                shapes.shuffle(rng);
                colors.shuffle(rng);
                if let Some(obj) = place_object(&scene.objects, shapes[0], colors[0], rng) {
                    return Ok(EditSpec::Add { object: obj });
                }
            }
            "style_tint" => {
                let tint = *ALL_TINTS.choose(rng).expect("non-empty");
                return Ok(EditSpec::StyleTint { tint });
            }
            _ => unreachable!(),
        }
    }
    Err(Error::Validation(
        "no valid edit found for scene".to_string(),
    ))
}

/// The result of applying an edit: edited scene, rendered image, edited
/// caption, and the ground-truth changed region at base resolution.
#[derive(Debug, Clone)]
pub struct AppliedEdit {
    pub scene_edit: SceneSpec,
    pub image_edit: ImageGrid,
    pub caption_edit: String,
    pub region_truth: RegionMask,
}

/// Apply an edit to a scene by editing the description and re-rendering.
pub fn apply_edit(scene: &SceneSpec, edit: &EditSpec) -> Result<AppliedEdit> {
    let mut edited = scene.clone();
    let region_truth = match edit {
        EditSpec::Recolor { shape, to } => {
            let idx = find_object(scene, *shape).ok_or_else(|| {
                Error::Validation(format!("no {} in scene to recolor", shape.word()))
            })?;
            edited.objects[idx].color = *to;
            object_mask(&scene.objects[idx])
        }
        EditSpec::BackgroundSwap { to } => {
            if *to == scene.background {
                return Err(Error::Validation(
                    "background swap target equals current background".to_string(),
                ));
            }
            edited.background = *to;
            // Every pixel where the background shows through changes,
            // including partially covered object edges.
            let full = full_coverage_mask(scene);
            RegionMask::new(full.data.mapv(|v| 1.0 - v)).expect("complement of binary mask")
        }
        EditSpec::Remove { shape } => {
            let idx = find_object(scene, *shape).ok_or_else(|| {
                Error::Validation(format!("no {} in scene to remove", shape.word()))
            })?;
            let mask = object_mask(&scene.objects[idx]);
            edited.objects.remove(idx);
            mask
        }
        EditSpec::Add { object } => {
            if edited.objects.iter().any(|o| o.shape == object.shape) {
                return Err(Error::Validation(format!(
                    "scene already has a {}",
                    object.shape.word()
                )));
            }
            edited.objects.push(*object);
            object_mask(object)
        }
        EditSpec::StyleTint { tint } => {
            edited.tint = Some(*tint);
            RegionMask::new(ArrayD::from_elem(IxDyn(&[BASE_SIZE, BASE_SIZE]), 1.0))
                .expect("all-ones mask")
        }
    };
    let image_edit = render(&edited);
    let caption_edit = caption(&edited);
    Ok(AppliedEdit {
        scene_edit: edited,
        image_edit,
        caption_edit,
        region_truth,
    })
}

/// One instruction-edit pair for a scene, deterministic in `(seed, index, k)`.
pub fn gen_instruction(seed: u64, index: u64, k: u64) -> Result<(SceneSpec, EditSpec, String)> {
    let scene = synth_scene_spec(seed, index);
    let mut rng = rng_for(seed, "edit", index.wrapping_mul(1 << 20).wrapping_add(k));
    let edit = gen_edit(&scene, &mut rng)?;
    let text = edit.instruction();
    Ok((scene, edit, text))
}
