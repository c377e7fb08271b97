//! Rendering and pixel-level decoding of glyph-world scenes.
//!
//! A scene is a 32×32 canvas with an identity banner across the top four rows
//! and one 12×12 face glyph below it. The banner lights one of sixteen 2-pixel
//! slots; four identity bits toggle the glyph's facial features; emotion sets
//! the glyph's mouth arc and its stroke brightness.

use crate::encoders::Image;
use crate::grounding::BBox;

pub const CANVAS: usize = 32;
pub const GLYPH: usize = 12;
pub const BANNER_ROWS: usize = 4;
/// Glyph top-left y range (inclusive), below the banner.
pub const MIN_Y: usize = BANNER_ROWS + 1;
pub const MAX_Y: usize = CANVAS - GLYPH;
pub const MAX_X: usize = CANVAS - GLYPH;
/// Glyph corners sit on a lattice of this pitch, half a patch.
pub const POSITION_STEP: usize = 4;

pub const POSITIVE_INTENSITY: f64 = 1.0;
pub const NEGATIVE_INTENSITY: f64 = 0.6;
const BANNER_ON: f64 = 0.8;
const SLOT: usize = CANVAS / 16;

/// Everything drawn for one glyph.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Face {
    /// Identity in `0..16`; bit k toggles feature k.
    pub identity: usize,
    /// Mouth arc: smile when true.
    pub smile: bool,
    /// Stroke brightness: bright when true.
    pub bright: bool,
    /// Dashed outline left behind by a face swap.
    pub seam: bool,
}

impl Face {
    pub fn new(identity: usize, positive: bool) -> Self {
        Self { identity, smile: positive, bright: positive, seam: false }
    }

    fn intensity(&self) -> f64 {
        if self.bright {
            POSITIVE_INTENSITY
        } else {
            NEGATIVE_INTENSITY
        }
    }
}

pub fn glyph_box(x: usize, y: usize) -> BBox {
    let s = CANVAS as f64;
    BBox::new(x as f64 / s, y as f64 / s, (x + GLYPH) as f64 / s, (y + GLYPH) as f64 / s)
}

/// Local 12×12 mask of lit cells.
fn glyph_cells(face: &Face) -> [[bool; GLYPH]; GLYPH] {
    let mut m = [[false; GLYPH]; GLYPH];
    for i in 0..GLYPH {
        for j in 0..GLYPH {
            let border = i == 0 || j == 0 || i == GLYPH - 1 || j == GLYPH - 1;
            if border && (!face.seam || (i + j) % 2 == 0) {
                m[i][j] = true;
            }
        }
    }
    let bit = |k: usize| face.identity >> k & 1 == 1;
    // Eyes: 2×2 block when set, single dot otherwise.
    for (k, c) in [(0, 2), (1, 8)] {
        if bit(k) {
            for (r, cc) in [(3, c), (3, c + 1), (4, c), (4, c + 1)] {
                m[r][cc] = true;
            }
        } else {
            m[4][c + 1 - k] = true;
        }
    }
    if bit(2) {
        for (r, c) in [(5, 5), (5, 6), (6, 5), (6, 6)] {
            m[r][c] = true;
        }
    }
    if bit(3) {
        for c in 2..10 {
            m[2][c] = true;
        }
    }
    let (flat, corners) = if face.smile { (9, 8) } else { (8, 9) };
    for c in 4..8 {
        m[flat][c] = true;
    }
    m[corners][3] = true;
    m[corners][8] = true;
    m
}

/// Overwrites the 12×12 square at `(x, y)` with the glyph.
pub fn draw_face(img: &mut Image, x: usize, y: usize, face: &Face) {
    let cells = glyph_cells(face);
    let b = face.intensity();
    for (i, row) in cells.iter().enumerate() {
        for (j, &on) in row.iter().enumerate() {
            img.set(y + i, x + j, if on { b } else { 0.0 });
        }
    }
}

pub fn draw_banner(img: &mut Image, identity: usize) {
    for r in 0..BANNER_ROWS {
        for c in 0..CANVAS {
            img.set(r, c, if c / SLOT == identity { BANNER_ON } else { 0.0 });
        }
    }
}

pub fn render(banner_identity: usize, face: &Face, x: usize, y: usize) -> Image {
    let mut img = Image::blank(CANVAS, CANVAS);
    draw_banner(&mut img, banner_identity);
    draw_face(&mut img, x, y, face);
    img
}

/// Scene content recovered from pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DecodedScene {
    pub banner_identity: usize,
    pub face: Face,
    pub x: usize,
    pub y: usize,
}

/// Inverts `render` on clean images: locates the glyph by its outline, then
/// reads each feature by nearest-template matching.
pub fn decode(img: &Image) -> Option<DecodedScene> {
    if img.height != CANVAS || img.width != CANVAS {
        return None;
    }
    let slot_mass =
        |k: usize| -> f64 { (0..BANNER_ROWS).flat_map(|r| (k * SLOT..(k + 1) * SLOT).map(move |c| img.get(r, c))).sum() };
    let banner_identity = (0..16).max_by(|&a, &b| slot_mass(a).total_cmp(&slot_mass(b)))?;

    let border_score = |x: usize, y: usize| -> f64 {
        let mut s = 0.0;
        for t in 0..GLYPH {
            s += img.get(y, x + t) + img.get(y + GLYPH - 1, x + t);
            if t > 0 && t < GLYPH - 1 {
                s += img.get(y + t, x) + img.get(y + t, x + GLYPH - 1);
            }
        }
        s
    };
    let (mut best, mut at) = (f64::NEG_INFINITY, (0, 0));
    for y in MIN_Y..=MAX_Y {
        for x in 0..=MAX_X {
            let s = border_score(x, y);
            if s > best {
                best = s;
                at = (x, y);
            }
        }
    }
    let (x, y) = at;
    let local = |i: usize, j: usize| img.get(y + i, x + j);
    let b = (0..GLYPH).map(|t| local(0, t)).fold(0.0, f64::max);
    if b <= 0.0 {
        return None;
    }
    let bright = b > (POSITIVE_INTENSITY + NEGATIVE_INTENSITY) / 2.0;
    let seam = local(0, 1) < b / 2.0;
    let lit = |i: usize, j: usize| local(i, j) > b / 2.0;
    let mut identity = 0;
    if lit(3, 2) {
        identity |= 1;
    }
    if lit(3, 9) {
        identity |= 2;
    }
    if lit(5, 5) {
        identity |= 4;
    }
    if lit(2, 5) {
        identity |= 8;
    }
    let smile = lit(9, 5);
    Some(DecodedScene { banner_identity, face: Face { identity, smile, bright, seam }, x, y })
}
