use super::*;
use crate::encoders::TokenVocab;

fn mix() -> MixConfig {
    MixConfig::default()
}

#[test]
fn pristine_generation_is_deterministic_and_consistent() {
    let vocab = TokenVocab::glyph_world();
    for seed in 0..200 {
        let s = gen_pristine(seed).unwrap();
        assert_eq!(s, gen_pristine(seed).unwrap());
        s.validate().unwrap();
        assert!(!s.y_bin && s.y_box.is_null() && s.y_tok.iter().all(|&t| !t));
        let scene = glyph::decode(&s.image).unwrap();
        assert_eq!(vocab.name_index(s.text.ids[NAME_SLOT]), Some(scene.face.identity));
        assert_eq!(scene.banner_identity, scene.face.identity);
        assert_eq!(vocab.polarity(s.text.ids[SENT_SLOT]), Some(scene.face.smile));
        assert_eq!(s.text.real_len(), 6);
    }
}

#[test]
fn image_manipulations_are_local() {
    for seed in 0..50 {
        let s = gen_pristine(seed).unwrap();
        for kind in [ManipKind::FaceSwap, ManipKind::FaceAttribute] {
            let m = apply_image_manip(&s, kind, seed + 1000).unwrap();
            let mut expect = [false; 4];
            expect[kind.index()] = true;
            assert_eq!(m.y_mul, expect);
            assert!(m.y_bin);
            let b = m.y_box;
            assert!((b.area() - (12.0f64 / 32.0).powi(2)).abs() < 1e-12);
            for r in 0..32 {
                for c in 0..32 {
                    let (x, y) = ((c as f64 + 0.5) / 32.0, (r as f64 + 0.5) / 32.0);
                    let inside = x > b.x1 && x < b.x2 && y > b.y1 && y < b.y2;
                    if !inside {
                        assert_eq!(m.image.get(r, c), s.image.get(r, c));
                    }
                }
            }
            let before = glyph::decode(&s.image).unwrap().face;
            let after = glyph::decode(&m.image).unwrap().face;
            match kind {
                ManipKind::FaceSwap => {
                    assert_ne!(after.identity, before.identity);
                    assert_eq!((after.smile, after.bright), (before.smile, before.bright));
                }
                _ => {
                    assert_eq!(after.identity, before.identity);
                    assert_eq!(after.smile, !before.smile);
                    assert_eq!(after.bright, before.bright);
                }
            }
            assert!(matches!(apply_image_manip(&m, ManipKind::FaceAttribute, 1), Err(Error::AlreadyApplied(_))));
        }
    }
}

#[test]
fn text_manipulations_label_changed_tokens() {
    let vocab = TokenVocab::glyph_world();
    for seed in 0..50 {
        let s = gen_pristine(seed).unwrap();
        let ta = apply_text_manip(&s, ManipKind::TextAttribute, seed).unwrap();
        assert_eq!(ta.y_tok.iter().filter(|&&t| t).count(), 1);
        assert!(ta.y_tok[SENT_SLOT]);
        for i in (0..TEXT_LEN).filter(|&i| i != SENT_SLOT) {
            assert_eq!(ta.text.ids[i], s.text.ids[i]);
        }
        assert_eq!(vocab.polarity(ta.text.ids[SENT_SLOT]), vocab.polarity(s.text.ids[SENT_SLOT]).map(|p| !p));

        let ts = apply_text_manip(&s, ManipKind::TextSwap, seed).unwrap();
        assert_eq!(ts.y_mul, [false, false, true, false]);
        assert!(ts.y_tok[NAME_SLOT]);
        assert_ne!(ts.text.ids[NAME_SLOT], s.text.ids[NAME_SLOT]);
        assert_eq!(vocab.polarity(ts.text.ids[SENT_SLOT]), vocab.polarity(s.text.ids[SENT_SLOT]));
        for i in 0..TEXT_LEN {
            assert_eq!(ts.y_tok[i], ts.text.ids[i] != s.text.ids[i]);
        }
        assert!(matches!(apply_text_manip(&ta, ManipKind::TextSwap, 1), Err(Error::AlreadyApplied(_))));
    }
}

#[test]
fn swapped_text_avoids_the_visible_identity() {
    let vocab = TokenVocab::glyph_world();
    for seed in 0..100 {
        let s = apply_image_manip(&gen_pristine(seed).unwrap(), ManipKind::FaceSwap, seed).unwrap();
        let t = apply_text_manip(&s, ManipKind::TextSwap, seed).unwrap();
        let shown = glyph::decode(&t.image).unwrap().face.identity;
        assert_ne!(vocab.name_index(t.text.ids[NAME_SLOT]), Some(shown));
    }
}

#[test]
fn schema_holds_and_brute_force_rule_is_exact() {
    let pool = gen_pool(11, 10_000, &mix()).unwrap();
    for s in &pool {
        s.validate().unwrap();
        assert_eq!(brute_force_is_fake(s).unwrap(), s.y_bin, "{}", s.id);
    }
}

#[test]
fn mix_proportions_match_targets() {
    let pool = gen_pool(3, 50_000, &mix()).unwrap();
    let n = pool.len() as f64;
    for (name, count) in class_counts(&pool) {
        let target = if name == "pristine" { 0.3 } else { 0.7 / 8.0 };
        let share = count as f64 / n;
        assert!((share - target).abs() < 0.02, "{name}: {share}");
    }
}

#[test]
fn jsonl_round_trip_and_perturbation() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.jsonl");
    let pool = gen_pool(5, 300, &mix()).unwrap();
    write_jsonl(&path, &pool, &PerturbConfig::none()).unwrap();
    assert_eq!(read_jsonl(&path).unwrap(), pool);

    write_jsonl(&path, &pool, &PerturbConfig { fraction: 0.5, sigma: 0.05, seed: 9 }).unwrap();
    let noisy = read_jsonl(&path).unwrap();
    let flagged = noisy.iter().filter(|s| s.perturbed).count();
    assert!(flagged > 100 && flagged < 200, "{flagged}");
    for (a, b) in pool.iter().zip(&noisy) {
        assert_eq!(a.text, b.text);
        assert_eq!(a.y_mul, b.y_mul);
        assert_eq!(b.perturbed, a.image != b.image);
    }
}

#[test]
fn malformed_lines_are_rejected_with_line_number() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.jsonl");
    let pool = gen_pool(5, 3, &mix()).unwrap();
    write_jsonl(&path, &pool, &PerturbConfig::none()).unwrap();
    let mut text = std::fs::read_to_string(&path).unwrap();
    text.push_str("{\"id\": \"broken\"}\n");
    std::fs::write(&path, &text).unwrap();
    match read_jsonl(&path) {
        Err(Error::Parse { line, .. }) => assert_eq!(line, 4),
        other => panic!("expected parse error, got {other:?}"),
    }

    // Labels that violate the schema are rejected too.
    let mut bad = pool[0].clone();
    bad.y_bin = !bad.y_bin;
    let lines: Vec<String> = text.lines().take(1).map(String::from).collect();
    let flipped = lines[0].replace(&format!("\"y_bin\":{}", pool[0].y_bin as u8), &format!("\"y_bin\":{}", bad.y_bin as u8));
    std::fs::write(&path, flipped + "\n").unwrap();
    assert!(matches!(read_jsonl(&path), Err(Error::Parse { line: 1, .. })));
}
