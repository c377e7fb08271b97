use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::Var;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{param_gradcheck, Graph, ParamStore};

fn random_image(seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Image::new(32, 32, (0..1024).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
}

#[test]
fn tokenize_pads_and_masks() {
    let v = TokenVocab::glyph_world();
    let empty: [&str; 0] = [];
    let t = v.tokenize(&empty, 12).unwrap();
    assert!(t.ids.iter().all(|&i| i == PAD_ID));
    assert!(t.mask.iter().all(|&m| !m));

    let full: Vec<&str> = NAMES[..12].to_vec();
    let t = v.tokenize(&full, 12).unwrap();
    assert!(t.mask.iter().all(|&m| m));
    assert!(!t.ids.contains(&PAD_ID) && !t.ids.contains(&CLS_ID));
    let (ids, mask) = t.with_cls();
    assert_eq!(ids[0], CLS_ID);
    assert_eq!(ids.len(), 13);
    assert!(mask[0]);
}

#[test]
fn tokenize_rejects_unknown_and_reserved_tokens() {
    let v = TokenVocab::glyph_world();
    assert!(matches!(v.tokenize(&["ada", "zebra"], 12), Err(Error::UnknownToken(_))));
    assert!(v.tokenize(&["[PAD]"], 12).is_err());
    assert!(v.tokenize(&["[CLS]"], 12).is_err());
}

#[test]
fn detokenize_inverts_tokenize() {
    let v = TokenVocab::glyph_world();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..200 {
        let n = rng.random_range(0..=12);
        let words: Vec<String> = (0..n).map(|_| v.token(rng.random_range(2..v.len())).unwrap().to_string()).collect();
        let t = v.tokenize(&words, 12).unwrap();
        assert_eq!(v.detokenize(&t), words);
    }
}

#[test]
fn vocab_ids_are_dense_and_unique() {
    let v = TokenVocab::glyph_world();
    let mut seen = std::collections::HashSet::new();
    for id in 0..v.len() {
        assert!(seen.insert(v.token(id).unwrap().to_string()));
    }
    assert!(v.token(v.len()).is_none());
}

#[test]
fn patchify_geometry_and_round_trip() {
    let grid = PatchGrid::new(32, 32, 8).unwrap();
    let img = random_image(1);
    let p = grid.patchify(&img).unwrap();
    assert_eq!(p.shape(), &[16, 64]);
    assert_eq!(grid.unpatchify(&p).unwrap(), img);
    // Top-left patch starts at pixel (0,0) and its second row at (1,0).
    assert_eq!(p.data()[0], img.get(0, 0));
    assert_eq!(p.data()[8], img.get(1, 0));
    // Second patch is the one to the right.
    assert_eq!(p.data()[64], img.get(0, 8));

    let flat = Image::new(32, 32, vec![0.4; 1024]).unwrap();
    let p = grid.patchify(&flat).unwrap();
    assert!(p.data().chunks(64).all(|r| r == p.row(0)));

    assert!(PatchGrid::new(30, 32, 8).is_err());
    assert!(grid.patchify(&Image::blank(16, 16)).is_err());
}

fn encoders(cfg: &ModelConfig, seed: u64) -> (ParamStore, ImageEncoder, TextEncoder) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vocab = TokenVocab::glyph_world();
    let img = ImageEncoder::new(&mut store, "img", cfg, &mut rng).unwrap();
    let txt = TextEncoder::new(&mut store, "txt", cfg, vocab.len(), &mut rng).unwrap();
    (store, img, txt)
}

fn caption(v: &TokenVocab, words: &[&str]) -> (Vec<usize>, Vec<bool>) {
    v.tokenize(words, 12).unwrap().with_cls()
}

#[test]
fn encoder_output_shapes() {
    let cfg = ModelConfig::desk();
    let (store, img, txt) = encoders(&cfg, 2);
    let v = TokenVocab::glyph_world();
    let a = random_image(3);
    let b = random_image(4);
    let mut g = Graph::new(&store, false);
    let out = img.encode(&mut g, &[&a, &b]).unwrap();
    assert_eq!(g.shape(out.seq), &[2, 17, 64]);
    let cls = out.cls(&mut g).unwrap();
    assert_eq!(g.shape(cls), &[2, 64]);
    let (ids, mask) = caption(&v, &["ada", "looks", "happy", "at", "the", "park"]);
    let t = txt.encode(&mut g, &ids, &mask).unwrap();
    assert_eq!(g.shape(t.seq), &[1, 13, 64]);
    let content = t.content(&mut g).unwrap();
    assert_eq!(g.shape(content), &[1, 12, 64]);
}

#[test]
fn pad_ids_do_not_leak_into_real_positions() {
    let cfg = ModelConfig::desk();
    let (store, _, txt) = encoders(&cfg, 5);
    let v = TokenVocab::glyph_world();
    let (ids, mask) = caption(&v, &["bo", "looks", "sad", "at", "the", "beach"]);
    let mut changed = ids.clone();
    changed[10] = v.id("museum").unwrap();
    let run = |ids: &[usize]| {
        let mut g = Graph::new(&store, false);
        let out = txt.encode(&mut g, ids, &mask).unwrap();
        g.value(out.seq).clone()
    };
    let (a, b) = (run(&ids), run(&changed));
    for (pos, (ra, rb)) in a.data().chunks(64).zip(b.data().chunks(64)).enumerate() {
        if mask[pos] {
            for (x, y) in ra.iter().zip(rb) {
                assert!((x - y).abs() < 1e-12, "position {pos}");
            }
        }
    }
}

#[test]
fn permuting_patches_changes_patch_embeddings() {
    let cfg = ModelConfig::desk();
    let (store, img, _) = encoders(&cfg, 6);
    let a = random_image(7);
    let grid = img.grid;
    let p = grid.patchify(&a).unwrap();
    let mut rows: Vec<&[f64]> = p.data().chunks(64).collect();
    rows.swap(0, 5);
    let swapped = crate::autodiff::Tensor::new(vec![16, 64], rows.concat()).unwrap();
    let b = grid.unpatchify(&swapped).unwrap();
    let mut g = Graph::new(&store, false);
    let oa = img.encode(&mut g, &[&a]).unwrap();
    let ob = img.encode(&mut g, &[&b]).unwrap();
    let (ea, eb) = (g.value(oa.seq).data(), g.value(ob.seq).data());
    // Patch 0 of `b` holds the pixels of patch 5 of `a`; position embeddings differ.
    assert_ne!(&ea[6 * 64..7 * 64], &eb[64..2 * 64]);
}

#[test]
fn encoders_pass_gradcheck() {
    let cfg = ModelConfig::tiny();
    let (store, img, txt) = encoders(&cfg, 8);
    let v = TokenVocab::glyph_world();
    let a = random_image(9);
    let (ids, mask) = caption(&v, &["cy", "looks", "calm", "at", "the", "garden"]);
    let f = |g: &mut Graph<'_>| -> Result<Var> {
        let io = img.encode(g, &[&a])?;
        let to = txt.encode(g, &ids, &mask)?;
        let ic = io.cls(g)?;
        let tc = to.cls(g)?;
        let p = g.mul(ic, tc)?;
        let s1 = g.sum(p);
        let sq = g.mul(io.seq, io.seq)?;
        let s2 = g.mean(sq);
        g.add(s1, s2)
    };
    let r = param_gradcheck(&store, f, 1e-5, Some(24)).unwrap();
    assert!(r.passes(1e-4), "{r:?}");
}
