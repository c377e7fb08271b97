//! Glyph-world: a procedural image-caption domain in which every manipulation
//! type leaves a recoverable cross-modal inconsistency.

pub mod glyph;
mod io;

pub use io::{read_jsonl, write_jsonl, PerturbConfig};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::{Image, TokenVocab, TokenizedText, FILLER, NAMES, NEGATIVE_WORDS, PLACES, POSITIVE_WORDS};
use crate::error::{Error, Result};
use crate::grounding::BBox;
use crate::reasoning::MANIP_TYPES;
use glyph::{Face, CANVAS, MAX_X, MAX_Y, MIN_Y, POSITION_STEP};

pub const IDENTITIES: usize = 16;
/// Content token slots; the caption uses the first six.
pub const TEXT_LEN: usize = 12;
const NAME_SLOT: usize = 0;
const SENT_SLOT: usize = 2;
const PLACE_SLOT: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ManipKind {
    FaceSwap,
    FaceAttribute,
    TextSwap,
    TextAttribute,
}

impl ManipKind {
    pub const ALL: [ManipKind; 4] =
        [ManipKind::FaceSwap, ManipKind::FaceAttribute, ManipKind::TextSwap, ManipKind::TextAttribute];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        MANIP_TYPES[self.index()]
    }

    pub fn from_name(s: &str) -> Option<Self> {
        MANIP_TYPES.iter().position(|&n| n == s).map(|i| Self::ALL[i])
    }

    pub fn is_image(self) -> bool {
        matches!(self, ManipKind::FaceSwap | ManipKind::FaceAttribute)
    }
}

/// One image-caption pair with its detection and grounding labels.
#[derive(Clone, Debug, PartialEq)]
pub struct ManipSample {
    pub id: String,
    pub image: Image,
    pub text: TokenizedText,
    pub y_bin: bool,
    /// `(FS, FA, TS, TA)`.
    pub y_mul: [bool; 4],
    pub y_box: BBox,
    pub y_tok: Vec<bool>,
    pub perturbed: bool,
}

impl ManipSample {
    pub fn kinds(&self) -> Vec<ManipKind> {
        ManipKind::ALL.into_iter().filter(|k| self.y_mul[k.index()]).collect()
    }

    pub fn has(&self, kind: ManipKind) -> bool {
        self.y_mul[kind.index()]
    }

    pub fn image_manipulated(&self) -> bool {
        self.has(ManipKind::FaceSwap) || self.has(ManipKind::FaceAttribute)
    }

    /// Checks every label invariant; returns the first violation.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidInput(format!("sample {}: {m}", self.id)));
        if self.image.height != CANVAS || self.image.width != CANVAS {
            return bad("image must be 32x32");
        }
        if self.image.pixels.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return bad("pixel outside [0, 1]");
        }
        let m = self.text.len();
        if m == 0 || self.text.mask.len() != m || self.y_tok.len() != m {
            return bad("token, mask and label lengths differ");
        }
        if self.y_bin != self.y_mul.iter().any(|&b| b) {
            return bad("y_bin disagrees with y_mul");
        }
        let [fs, fa, ts, ta] = self.y_mul;
        if fs && fa || ts && ta {
            return bad("two manipulations of the same modality");
        }
        if self.y_box.is_null() == (fs || fa) {
            return bad("box present iff the image was manipulated");
        }
        let b = self.y_box;
        if !b.is_null() && !(0.0 <= b.x1 && b.x1 <= b.x2 && b.x2 <= 1.0 && 0.0 <= b.y1 && b.y1 <= b.y2 && b.y2 <= 1.0) {
            return bad("box corners out of order or range");
        }
        if self.y_tok.iter().any(|&t| t) && !(ts || ta) {
            return bad("token labels without a text manipulation");
        }
        if self.y_tok.iter().zip(&self.text.mask).any(|(&t, &real)| t && !real) {
            return bad("padding position labelled manipulated");
        }
        Ok(())
    }
}

/// Six-token caption `<NAME> looks <SENT> at the <PLACE>`.
fn caption(vocab: &TokenVocab, identity: usize, sentiment: &str, place: &str) -> Result<TokenizedText> {
    let words = [NAMES[identity], FILLER[0], sentiment, FILLER[1], FILLER[2], place];
    vocab.tokenize(&words, TEXT_LEN)
}

fn sentiment_word(rng: &mut impl Rng, positive: bool) -> &'static str {
    let lex: &[&str] = if positive { &POSITIVE_WORDS } else { &NEGATIVE_WORDS };
    lex.choose(rng).copied().unwrap_or(lex[0])
}

fn decode_scene(sample: &ManipSample) -> Result<glyph::DecodedScene> {
    glyph::decode(&sample.image).ok_or_else(|| Error::InvalidInput(format!("sample {}: no glyph found", sample.id)))
}

/// Consistent pair: the glyph, the banner and the caption name share one
/// identity, and the glyph's emotion matches the sentiment word.
pub fn gen_pristine(seed: u64) -> Result<ManipSample> {
    let vocab = TokenVocab::glyph_world();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let identity = rng.random_range(0..IDENTITIES);
    let positive = rng.random_bool(0.5);
    let x = rng.random_range(0..=MAX_X / POSITION_STEP) * POSITION_STEP;
    let y = rng.random_range(MIN_Y.div_ceil(POSITION_STEP)..=MAX_Y / POSITION_STEP) * POSITION_STEP;
    let image = glyph::render(identity, &Face::new(identity, positive), x, y);
    let place = PLACES.choose(&mut rng).copied().unwrap_or(PLACES[0]);
    let text = caption(&vocab, identity, sentiment_word(&mut rng, positive), place)?;
    Ok(ManipSample {
        id: format!("{seed:016x}"),
        image,
        y_tok: vec![false; text.len()],
        text,
        y_bin: false,
        y_mul: [false; 4],
        y_box: BBox::NULL,
        perturbed: false,
    })
}

/// Face swap (new identity, same emotion, seam left behind) or face attribute
/// edit (mouth arc flipped, stroke brightness kept). Only pixels inside the
/// glyph box change.
pub fn apply_image_manip(sample: &ManipSample, kind: ManipKind, seed: u64) -> Result<ManipSample> {
    if !kind.is_image() {
        return Err(Error::InvalidInput(format!("{} is not an image manipulation", kind.name())));
    }
    if sample.image_manipulated() {
        return Err(Error::AlreadyApplied(kind.name()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scene = decode_scene(sample)?;
    let mut face = scene.face;
    match kind {
        ManipKind::FaceSwap => {
            let shift = rng.random_range(1..IDENTITIES);
            face.identity = (face.identity + shift) % IDENTITIES;
            face.seam = true;
        }
        _ => face.smile = !face.smile,
    }
    let mut out = sample.clone();
    glyph::draw_face(&mut out.image, scene.x, scene.y, &face);
    out.y_box = glyph::glyph_box(scene.x, scene.y);
    out.y_mul[kind.index()] = true;
    out.y_bin = true;
    Ok(out)
}

/// Text swap (fresh caption for an identity other than both the original name
/// and the visible glyph, sentiment polarity kept) or text attribute edit
/// (sentiment word replaced by one of opposite polarity).
pub fn apply_text_manip(sample: &ManipSample, kind: ManipKind, seed: u64) -> Result<ManipSample> {
    if kind.is_image() {
        return Err(Error::InvalidInput(format!("{} is not a text manipulation", kind.name())));
    }
    if sample.has(ManipKind::TextSwap) || sample.has(ManipKind::TextAttribute) {
        return Err(Error::AlreadyApplied(kind.name()));
    }
    let vocab = TokenVocab::glyph_world();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids = &sample.text.ids;
    let polarity = vocab
        .polarity(ids[SENT_SLOT])
        .ok_or_else(|| Error::InvalidInput(format!("sample {}: no sentiment word", sample.id)))?;
    let mut out = sample.clone();
    match kind {
        ManipKind::TextSwap => {
            let name = vocab
                .name_index(ids[NAME_SLOT])
                .ok_or_else(|| Error::InvalidInput(format!("sample {}: no name token", sample.id)))?;
            let shown = decode_scene(sample)?.face.identity;
            let candidates: Vec<usize> = (0..IDENTITIES).filter(|&i| i != name && i != shown).collect();
            let identity = *candidates.choose(&mut rng).unwrap_or(&((name + 1) % IDENTITIES));
            let place = PLACES.choose(&mut rng).copied().unwrap_or(PLACES[0]);
            out.text = caption(&vocab, identity, sentiment_word(&mut rng, polarity), place)?;
        }
        _ => {
            let word = vocab.id(sentiment_word(&mut rng, !polarity))?;
            out.text.ids[SENT_SLOT] = word;
        }
    }
    out.y_tok = sample.text.ids.iter().zip(&out.text.ids).map(|(a, b)| a != b).collect();
    out.y_mul[kind.index()] = true;
    out.y_bin = true;
    Ok(out)
}

/// The nine pristine/fake classes: optional image kind × optional text kind.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct FakeClass {
    pub image: Option<ManipKind>,
    pub text: Option<ManipKind>,
}

impl FakeClass {
    pub const PRISTINE: FakeClass = FakeClass { image: None, text: None };

    pub fn all_fake() -> Vec<FakeClass> {
        let imgs = [None, Some(ManipKind::FaceSwap), Some(ManipKind::FaceAttribute)];
        let txts = [None, Some(ManipKind::TextSwap), Some(ManipKind::TextAttribute)];
        imgs.iter()
            .flat_map(|&image| txts.iter().map(move |&text| FakeClass { image, text }))
            .filter(|c| *c != FakeClass::PRISTINE)
            .collect()
    }

    pub fn of(sample: &ManipSample) -> Self {
        let kinds = sample.kinds();
        FakeClass {
            image: kinds.iter().copied().find(|k| k.is_image()),
            text: kinds.iter().copied().find(|k| !k.is_image()),
        }
    }
}

/// Share of pristine samples; the rest is split evenly over the eight fake classes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MixConfig {
    pub pristine_fraction: f64,
}

impl Default for MixConfig {
    fn default() -> Self {
        Self { pristine_fraction: 0.3 }
    }
}

fn mix_seed(seed: u64, index: u64, salt: u64) -> u64 {
    // splitmix64 finalizer over the combined key
    let mut z = seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ salt.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// The `index`-th sample of the pool seeded by `seed`; pure in its arguments.
pub fn gen_sample(seed: u64, index: u64, mix: &MixConfig) -> Result<ManipSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, index, 0));
    let class = if rng.random_bool(mix.pristine_fraction.clamp(0.0, 1.0)) {
        FakeClass::PRISTINE
    } else {
        let fakes = FakeClass::all_fake();
        fakes[rng.random_range(0..fakes.len())]
    };
    let mut s = gen_pristine(mix_seed(seed, index, 1))?;
    if let Some(k) = class.image {
        s = apply_image_manip(&s, k, mix_seed(seed, index, 2))?;
    }
    if let Some(k) = class.text {
        s = apply_text_manip(&s, k, mix_seed(seed, index, 3))?;
    }
    s.id = format!("{seed}-{index}");
    Ok(s)
}

pub fn gen_pool(seed: u64, count: usize, mix: &MixConfig) -> Result<Vec<ManipSample>> {
    (0..count as u64).map(|i| gen_sample(seed, i, mix)).collect()
}

/// Detection by inspection: fake iff the visible glyph identity differs from
/// the caption's name, or either emotion cue on the glyph contradicts the
/// sentiment word.
pub fn brute_force_is_fake(sample: &ManipSample) -> Result<bool> {
    let vocab = TokenVocab::glyph_world();
    let scene = decode_scene(sample)?;
    let name = vocab.name_index(sample.text.ids[NAME_SLOT]);
    let polarity = vocab.polarity(sample.text.ids[SENT_SLOT]);
    Ok(name != Some(scene.face.identity) || polarity != Some(scene.face.smile) || polarity != Some(scene.face.bright))
}

/// Per-class counts for a generated pool.
pub fn class_counts(pool: &[ManipSample]) -> Vec<(String, usize)> {
    let label = |c: &FakeClass| -> String {
        match (c.image, c.text) {
            (None, None) => "pristine".into(),
            (a, b) => a.iter().chain(b.iter()).map(|k| k.name()).collect::<Vec<_>>().join("+"),
        }
    };
    let mut classes = vec![FakeClass::PRISTINE];
    classes.extend(FakeClass::all_fake());
    classes
        .iter()
        .map(|c| (label(c), pool.iter().filter(|s| FakeClass::of(s) == *c).count()))
        .collect()
}

/// Slot indices of the caption template, for diagnostics.
pub fn caption_slots() -> [(usize, &'static str); 3] {
    [(NAME_SLOT, "name"), (SENT_SLOT, "sentiment"), (PLACE_SLOT, "place")]
}

#[cfg(test)]
mod tests;
