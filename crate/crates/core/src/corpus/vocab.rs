//! The 64-token caption language: synonym groups per attribute, filler
//! words, sentence templates, and the exact rule-based parser.

use crate::corpus::{AttributeRecord, Background, Color, Position, Shape, Size};
use crate::error::{Error, Result};

pub const VOCAB_SIZE: usize = 64;
pub const SYNONYMS_PER_GROUP: usize = 3;
/// Token id of `[mask]`, used by word-importance probing. It also appears as
/// an ordinary filler in one template so the whole vocabulary is reachable.
pub const MASK_TOKEN: u16 = 63;

const SHAPE_BASE: u16 = 0; // 4 groups of 3
const COLOR_BASE: u16 = 12; // 4 groups of 3
const POSITION_BASE: u16 = 24; // 4 groups of 3
const SIZE_BASE: u16 = 36; // 2 groups of 3
const BACKGROUND_BASE: u16 = 42; // 2 groups of 3
const FILLER_BASE: u16 = 48; // 16 fillers

pub const WORDS: [&str; VOCAB_SIZE] = [
    // shapes
    "circle", "disc", "round", "square", "box", "block", "triangle", "wedge", "arrow", "cross",
    "plus", "mark",
    // colors
    "red", "crimson", "scarlet", "green", "emerald", "leafy", "blue", "azure", "navy", "yellow",
    "gold", "amber",
    // positions
    "northwest", "upperleft", "topleft", "northeast", "upperright", "topright", "southwest",
    "lowerleft", "bottomleft", "southeast", "lowerright", "bottomright",
    // sizes
    "small", "little", "tiny", "large", "big", "huge",
    // backgrounds
    "dark", "dim", "shadowed", "light", "bright", "pale",
    // fillers
    "a", "the", "one", "shape", "on", "field", "in", "corner", "sits", "drawn", "over",
    "backdrop", "with", "tone", "seen", "[mask]",
];

pub fn word(token: u16) -> &'static str {
    WORDS[token as usize]
}

/// What a token contributes to a parse.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum TokenCategory {
    Shape(Shape),
    Color(Color),
    Position(Position),
    Size(Size),
    Background(Background),
    Filler,
}

pub fn categorize(token: u16) -> Result<TokenCategory> {
    if token as usize >= VOCAB_SIZE {
        return Err(Error::Domain(format!("token id {token} outside vocabulary")));
    }
    let group = |base: u16| ((token - base) / SYNONYMS_PER_GROUP as u16) as usize;
    Ok(match token {
        t if t < COLOR_BASE => TokenCategory::Shape(Shape::ALL[group(SHAPE_BASE)]),
        t if t < POSITION_BASE => TokenCategory::Color(Color::ALL[group(COLOR_BASE)]),
        t if t < SIZE_BASE => TokenCategory::Position(Position::ALL[group(POSITION_BASE)]),
        t if t < BACKGROUND_BASE => TokenCategory::Size(Size::ALL[group(SIZE_BASE)]),
        t if t < FILLER_BASE => TokenCategory::Background(Background::ALL[group(BACKGROUND_BASE)]),
        _ => TokenCategory::Filler,
    })
}

pub fn shape_token(s: Shape, synonym: usize) -> u16 {
    SHAPE_BASE + (s as u16) * 3 + synonym as u16
}

pub fn color_token(c: Color, synonym: usize) -> u16 {
    COLOR_BASE + (c as u16) * 3 + synonym as u16
}

pub fn position_token(p: Position, synonym: usize) -> u16 {
    POSITION_BASE + (p as u16) * 3 + synonym as u16
}

pub fn size_token(s: Size, synonym: usize) -> u16 {
    SIZE_BASE + (s as u16) * 3 + synonym as u16
}

pub fn background_token(b: Background, synonym: usize) -> u16 {
    BACKGROUND_BASE + (b as u16) * 3 + synonym as u16
}

fn filler(word: &str) -> u16 {
    let idx = WORDS[FILLER_BASE as usize..]
        .iter()
        .position(|w| *w == word)
        .expect("filler word exists");
    FILLER_BASE + idx as u16
}

/// One caption skeleton: fillers in fixed places, one slot per attribute.
#[derive(Copy, Clone, Debug)]
pub enum Slot {
    Shape,
    Color,
    Position,
    Size,
    Background,
    Word(&'static str),
}

/// Every template mentions each attribute exactly once and tops out at 8
/// tokens. Together the templates exercise all sixteen filler words, so the
/// full vocabulary occurs in captions.
pub const TEMPLATES: [&[Slot]; 6] = [
    &[
        Slot::Word("a"),
        Slot::Size,
        Slot::Color,
        Slot::Shape,
        Slot::Word("on"),
        Slot::Background,
        Slot::Position,
        Slot::Word("field"),
    ],
    &[
        Slot::Word("the"),
        Slot::Shape,
        Slot::Word("drawn"),
        Slot::Color,
        Slot::Size,
        Slot::Word("over"),
        Slot::Background,
        Slot::Position,
    ],
    &[
        Slot::Word("one"),
        Slot::Color,
        Slot::Shape,
        Slot::Word("sits"),
        Slot::Word("in"),
        Slot::Position,
        Slot::Size,
        Slot::Background,
    ],
    &[
        Slot::Shape,
        Slot::Word("corner"),
        Slot::Position,
        Slot::Word("with"),
        Slot::Color,
        Slot::Word("tone"),
        Slot::Size,
        Slot::Background,
    ],
    &[
        Slot::Word("seen"),
        Slot::Word("backdrop"),
        Slot::Background,
        Slot::Position,
        Slot::Shape,
        Slot::Color,
        Slot::Size,
        Slot::Word("[mask]"),
    ],
    &[
        Slot::Size,
        Slot::Color,
        Slot::Word("shape"),
        Slot::Shape,
        Slot::Position,
        Slot::Background,
    ],
];

/// Instantiates a template; `synonyms` holds one choice in 0..3 per attribute
/// in the order shape, color, position, size, background.
pub fn instantiate(template: &[Slot], attrs: &AttributeRecord, synonyms: [usize; 5]) -> Vec<u16> {
    template
        .iter()
        .map(|slot| match slot {
            Slot::Shape => shape_token(attrs.shape, synonyms[0]),
            Slot::Color => color_token(attrs.color, synonyms[1]),
            Slot::Position => position_token(attrs.position, synonyms[2]),
            Slot::Size => size_token(attrs.size, synonyms[3]),
            Slot::Background => background_token(attrs.background, synonyms[4]),
            Slot::Word(w) => filler(w),
        })
        .collect()
}

/// Recovers the attribute record a caption names. Exactly one token per
/// attribute group must be present; fillers are ignored.
pub fn parse_caption(tokens: &[u16]) -> Result<AttributeRecord> {
    let mut shape = None;
    let mut color = None;
    let mut position = None;
    let mut size = None;
    let mut background = None;
    fn put<T: Copy>(slot: &mut Option<T>, v: T, what: &str) -> Result<()> {
        if slot.is_some() {
            return Err(Error::Domain(format!("caption names {what} twice")));
        }
        *slot = Some(v);
        Ok(())
    }
    for &t in tokens {
        match categorize(t)? {
            TokenCategory::Shape(v) => put(&mut shape, v, "a shape")?,
            TokenCategory::Color(v) => put(&mut color, v, "a color")?,
            TokenCategory::Position(v) => put(&mut position, v, "a position")?,
            TokenCategory::Size(v) => put(&mut size, v, "a size")?,
            TokenCategory::Background(v) => put(&mut background, v, "a background")?,
            TokenCategory::Filler => {}
        }
    }
    let missing = |what: &str| Error::Domain(format!("caption names no {what}"));
    Ok(AttributeRecord {
        shape: shape.ok_or_else(|| missing("shape"))?,
        color: color.ok_or_else(|| missing("color"))?,
        position: position.ok_or_else(|| missing("position"))?,
        size: size.ok_or_else(|| missing("size"))?,
        background: background.ok_or_else(|| missing("background"))?,
    })
}

pub fn decode(tokens: &[u16]) -> String {
    tokens
        .iter()
        .map(|&t| word(t))
        .collect::<Vec<_>>()
        .join(" ")
}
