//! Closed-vocabulary caption and instruction grammar.
//!
//! Captions follow the template
//! `a {color} {shape} [and a {color} {shape}]... on {background} [in {tint} tint]`
//! and instructions one of five fixed templates. Both directions are
//! implemented: building text from a scene and parsing text back, so
//! round-tripping is testable and region proposals can ground instructions.

use super::scenes::{
    Background, Color, ObjectSpec, SceneSpec, Shape, Tint, ALL_BACKGROUNDS, ALL_COLORS, ALL_SHAPES,
    ALL_TINTS,
};

/// Maximum caption/instruction length in tokens (fits the text tower).
pub const MAX_TOKENS: usize = 16;

/// All words the grammar can emit. Index+1 is the token id; id 0 is padding.
pub fn vocabulary() -> Vec<&'static str> {
    let mut v = vec![
        "a", "and", "on", "in", "tint", "turn", "the", "change", "background", "to", "remove",
        "add", "make", "image",
    ];
    for c in ALL_COLORS {
        v.push(c.word());
    }
    for s in ALL_SHAPES {
        v.push(s.word());
    }
    for b in ALL_BACKGROUNDS {
        v.push(b.word());
    }
    for t in ALL_TINTS {
        v.push(t.word());
    }
    v
}

/// Vocabulary size including the padding id 0.
pub fn vocab_size() -> usize {
    vocabulary().len() + 1
}

/// Map text to token ids (1-based; unknown words get `None`).
pub fn tokenize(text: &str) -> Vec<Option<usize>> {
    let vocab = vocabulary();
    text.split_whitespace()
        .map(|w| vocab.iter().position(|v| *v == w).map(|i| i + 1))
        .collect()
}

/// Token ids padded/truncated to `MAX_TOKENS`, plus the true length.
/// Unknown words map to the padding id.
pub fn encode_tokens(text: &str) -> (Vec<usize>, usize) {
    let toks = tokenize(text);
    let len = toks.len().min(MAX_TOKENS);
    let mut ids = vec![0usize; MAX_TOKENS];
    for (i, t) in toks.into_iter().take(MAX_TOKENS).enumerate() {
        ids[i] = t.unwrap_or(0);
    }
    (ids, len)
}

/// Template caption for a scene.
pub fn caption(scene: &SceneSpec) -> String {
    let mut parts: Vec<String> = Vec::new();
    for (i, obj) in scene.objects.iter().enumerate() {
        if i > 0 {
            parts.push("and".to_string());
        }
        parts.push("a".to_string());
        parts.push(obj.color.word().to_string());
        parts.push(obj.shape.word().to_string());
    }
    parts.push("on".to_string());
    parts.push(scene.background.word().to_string());
    if let Some(t) = scene.tint {
        parts.push("in".to_string());
        parts.push(t.word().to_string());
        parts.push("tint".to_string());
    }
    parts.join(" ")
}

fn parse_color(w: &str) -> Option<Color> {
    ALL_COLORS.iter().copied().find(|c| c.word() == w)
}

fn parse_shape(w: &str) -> Option<Shape> {
    ALL_SHAPES.iter().copied().find(|s| s.word() == w)
}

fn parse_background(w: &str) -> Option<Background> {
    ALL_BACKGROUNDS.iter().copied().find(|b| b.word() == w)
}

fn parse_tint(w: &str) -> Option<Tint> {
    ALL_TINTS.iter().copied().find(|t| t.word() == w)
}

/// Scene content recovered from a caption (geometry is not in the text).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedCaption {
    pub objects: Vec<(Color, Shape)>,
    pub background: Background,
    pub tint: Option<Tint>,
}

/// Parse a template caption back into its content. Returns `None` for any
/// text outside the grammar.
pub fn parse_caption(text: &str) -> Option<ParsedCaption> {
    let words: Vec<&str> = text.split_whitespace().collect();
    let mut i = 0;
    let mut objects = Vec::new();
    loop {
        if i > 0 {
            if words.get(i) == Some(&"and") {
                i += 1;
            } else {
                break;
            }
        }
        if words.get(i) != Some(&"a") {
            return None;
        }
        let color = parse_color(words.get(i + 1)?)?;
        let shape = parse_shape(words.get(i + 2)?)?;
        objects.push((color, shape));
        i += 3;
    }
    if words.get(i) != Some(&"on") {
        return None;
    }
    let background = parse_background(words.get(i + 1)?)?;
    i += 2;
    let tint = if i < words.len() {
        if words.get(i) != Some(&"in") || words.get(i + 2) != Some(&"tint") {
            return None;
        }
        let t = parse_tint(words.get(i + 1)?)?;
        i += 3;
        Some(t)
    } else {
        None
    };
    if i != words.len() || objects.is_empty() {
        return None;
    }
    Some(ParsedCaption {
        objects,
        background,
        tint,
    })
}

/// An instruction decoded into its operation and arguments.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParsedInstruction {
    Recolor { shape: Shape, color: Color },
    BackgroundSwap { background: Background },
    Remove { shape: Shape },
    Add { color: Color, shape: Shape },
    StyleTint { tint: Tint },
}

/// Build the instruction text for each operation.
pub fn instruction_text(parsed: &ParsedInstruction) -> String {
    match parsed {
        ParsedInstruction::Recolor { shape, color } => {
            format!("turn the {} {}", shape.word(), color.word())
        }
        ParsedInstruction::BackgroundSwap { background } => {
            format!("change the background to {}", background.word())
        }
        ParsedInstruction::Remove { shape } => format!("remove the {}", shape.word()),
        ParsedInstruction::Add { color, shape } => {
            format!("add a {} {}", color.word(), shape.word())
        }
        ParsedInstruction::StyleTint { tint } => format!("make the image {}", tint.word()),
    }
}

/// Parse an instruction; `None` for anything outside the five templates.
pub fn parse_instruction(text: &str) -> Option<ParsedInstruction> {
    let w: Vec<&str> = text.split_whitespace().collect();
    match w.as_slice() {
        ["turn", "the", shape, color] => Some(ParsedInstruction::Recolor {
            shape: parse_shape(shape)?,
            color: parse_color(color)?,
        }),
        ["change", "the", "background", "to", bg] => Some(ParsedInstruction::BackgroundSwap {
            background: parse_background(bg)?,
        }),
        ["remove", "the", shape] => Some(ParsedInstruction::Remove {
            shape: parse_shape(shape)?,
        }),
        ["add", "a", color, shape] => Some(ParsedInstruction::Add {
            color: parse_color(color)?,
            shape: parse_shape(shape)?,
        }),
        ["make", "the", "image", tint] => Some(ParsedInstruction::StyleTint {
            tint: parse_tint(tint)?,
        }),
        _ => None,
    }
}

/// Check that parsed caption content matches a scene exactly (order included).
pub fn caption_matches_scene(parsed: &ParsedCaption, scene: &SceneSpec) -> bool {
    parsed.background == scene.background
        && parsed.tint == scene.tint
        && parsed.objects.len() == scene.objects.len()
        && parsed
            .objects
            .iter()
            .zip(scene.objects.iter())
            .all(|(&(c, s), o): (&(Color, Shape), &ObjectSpec)| o.color == c && o.shape == s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::scenes::synth_scene_spec;

    #[test]
    fn caption_round_trips_for_generated_scenes() {
        for idx in 0..300 {
            let mut s = synth_scene_spec(11, idx);
            if idx % 3 == 0 {
                s.tint = Some(if idx % 6 == 0 { Tint::Warm } else { Tint::Cool });
            }
            let text = caption(&s);
            let toks = tokenize(&text);
            assert!(toks.len() <= MAX_TOKENS, "caption too long: {text}");
            assert!(toks.iter().all(|t| t.is_some()), "out-of-vocab word in: {text}");
            let parsed = parse_caption(&text).unwrap_or_else(|| panic!("unparseable: {text}"));
            assert!(caption_matches_scene(&parsed, &s), "mismatch for: {text}");
        }
    }

    #[test]
    fn example_caption_forms() {
        let s = SceneSpec {
            background: Background::Grass,
            objects: vec![
                ObjectSpec {
                    shape: Shape::Circle,
                    color: Color::Red,
                    cx: 20.0,
                    cy: 20.0,
                    size: 8.0,
                },
                ObjectSpec {
                    shape: Shape::Square,
                    color: Color::Blue,
                    cx: 44.0,
                    cy: 44.0,
                    size: 8.0,
                },
            ],
            tint: None,
        };
        assert_eq!(caption(&s), "a red circle and a blue square on grass");
        let mut tinted = s.clone();
        tinted.tint = Some(Tint::Warm);
        assert_eq!(
            caption(&tinted),
            "a red circle and a blue square on grass in warm tint"
        );
    }

    #[test]
    fn instructions_round_trip() {
        let cases = [
            ParsedInstruction::Recolor {
                shape: Shape::Circle,
                color: Color::Yellow,
            },
            ParsedInstruction::BackgroundSwap {
                background: Background::Night,
            },
            ParsedInstruction::Remove { shape: Shape::Star },
            ParsedInstruction::Add {
                color: Color::Pink,
                shape: Shape::Triangle,
            },
            ParsedInstruction::StyleTint { tint: Tint::Cool },
        ];
        for c in cases {
            let text = instruction_text(&c);
            assert!(tokenize(&text).iter().all(|t| t.is_some()), "oov in {text}");
            assert_eq!(parse_instruction(&text), Some(c), "round trip failed for {text}");
        }
        assert_eq!(
            instruction_text(&ParsedInstruction::Recolor {
                shape: Shape::Circle,
                color: Color::Yellow
            }),
            "turn the circle yellow"
        );
    }

    #[test]
    fn malformed_text_is_rejected() {
        for bad in [
            "",
            "a circle red on grass",
            "a red circle on unknown",
            "a red circle grass",
            "turn the circle",
            "paint the circle yellow",
            "a red circle on grass extra",
        ] {
            assert!(parse_caption(bad).is_none(), "caption accepted: {bad:?}");
            assert!(parse_instruction(bad).is_none(), "instruction accepted: {bad:?}");
        }
    }

    #[test]
    fn encode_tokens_pads_and_reports_length() {
        let (ids, len) = encode_tokens("a red circle on grass");
        assert_eq!(len, 5);
        assert_eq!(ids.len(), MAX_TOKENS);
        assert!(ids[..5].iter().all(|&i| i != 0));
        assert!(ids[5..].iter().all(|&i| i == 0));
        let (ids_empty, len_empty) = encode_tokens("");
        assert_eq!(len_empty, 0);
        assert!(ids_empty.iter().all(|&i| i == 0));
    }

    #[test]
    fn vocab_has_no_duplicates_and_fits_budget() {
        let v = vocabulary();
        let mut sorted = v.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), v.len(), "duplicate vocabulary word");
        assert!(vocab_size() < 64, "vocab should stay small, got {}", vocab_size());
    }
}
