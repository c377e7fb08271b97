use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::nn::param_gradcheck;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn unit_rows(rows: usize, dim: usize, seed: u64) -> Tensor {
    let mut s = ParamStore::new();
    let id = s.normal("x", &[rows, dim], 1.0, &mut rng(seed));
    let mut t = s.get(id).clone();
    for r in t.data_mut().chunks_mut(dim) {
        let n = r.iter().map(|x| x * x).sum::<f64>().sqrt();
        r.iter_mut().for_each(|x| *x /= n);
    }
    t
}

/// Direct scalar evaluation of one InfoNCE term, independent of the tape.
fn infonce_oracle(s_pos: f64, s_neg: &[f64], tau: f64, with_positive: bool) -> f64 {
    let mut denom: f64 = s_neg.iter().map(|s| (s / tau).exp()).sum();
    if with_positive {
        denom += (s_pos / tau).exp();
    }
    -((s_pos / tau).exp() / denom).ln()
}

fn eval_infonce(anchor: &Tensor, positive: &Tensor, negatives: &Tensor, tau: f64, den: Denominator) -> f64 {
    let store = ParamStore::new();
    let mut g = Graph::new(&store, false);
    let a = g.constant(anchor.clone());
    let p = g.constant(positive.clone());
    let l = infonce(&mut g, a, p, negatives, Temperature::new(tau).unwrap(), den).unwrap();
    g.value(l).item()
}

fn row(v: Vec<f64>) -> Tensor {
    let n = v.len();
    Tensor::new(vec![1, n], v).unwrap()
}

#[test]
fn equal_similarities_give_log_k_plus_one() {
    let k = 7;
    let a = row(vec![1.0, 0.0]);
    let negs = Tensor::new(vec![k, 2], [1.0, 0.0].repeat(k)).unwrap();
    let l = eval_infonce(&a, &a, &negs, 0.07, Denominator::WithPositive);
    assert!((l - ((k + 1) as f64).ln()).abs() < 1e-12);
}

#[test]
fn unit_temperature_single_negative() {
    let a = row(vec![1.0, 0.0]);
    let negs = Tensor::new(vec![1, 2], vec![0.0, 1.0]).unwrap();
    let l = eval_infonce(&a, &a, &negs, 1.0, Denominator::WithPositive);
    let expected = (1.0 + (-1.0f64).exp()).ln();
    assert!((l - expected).abs() < 1e-12);
    assert!((l - 0.3133).abs() < 1e-4);
}

#[test]
fn separated_pairs_drive_loss_to_zero() {
    let a = row(vec![1.0, 0.0]);
    let negs = Tensor::new(vec![3, 2], [-1.0, 0.0].repeat(3)).unwrap();
    assert!(eval_infonce(&a, &a, &negs, 0.01, Denominator::WithPositive) < 1e-12);
}

#[test]
fn both_denominators_match_the_scalar_oracle() {
    let a = unit_rows(3, 6, 1);
    let p = unit_rows(3, 6, 2);
    let negs = unit_rows(9, 6, 3);
    for den in [Denominator::WithPositive, Denominator::NegativesOnly] {
        let got = eval_infonce(&a, &p, &negs, 0.3, den);
        let mut expected = 0.0;
        for i in 0..3 {
            let dot = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(u, v)| u * v).sum::<f64>();
            let sp = dot(a.row(i), p.row(i));
            let sn: Vec<f64> = (0..9).map(|k| dot(a.row(i), negs.row(k))).collect();
            expected += infonce_oracle(sp, &sn, 0.3, den == Denominator::WithPositive) / 3.0;
        }
        assert!((got - expected).abs() < 1e-10, "{den:?}: {got} vs {expected}");
    }
}

#[test]
fn invalid_inputs_are_rejected() {
    assert!(Temperature::new(0.0).is_err());
    assert!(Temperature::new(-1.0).is_err());
    let store = ParamStore::new();
    let mut g = Graph::new(&store, false);
    let a = g.constant(row(vec![1.0, 0.0]));
    let empty = Tensor::zeros(&[0, 2]);
    assert!(infonce(&mut g, a, a, &empty, Temperature::default(), Denominator::WithPositive).is_err());
    let zero = g.constant(Tensor::zeros(&[2, 3]));
    assert!(l2_normalize(&mut g, zero).is_err());
}

#[test]
fn projection_rows_are_unit_norm() {
    let mut store = ParamStore::new();
    let head = ProjectionHead::new(&mut store, "h", 8, 4, &mut rng(4));
    let mut g = Graph::new(&store, false);
    let x = g.constant(unit_rows(5, 8, 5));
    let y = head.forward(&mut g, x).unwrap();
    let out = g.value(y).clone();
    for r in out.data().chunks(4) {
        assert!((r.iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).abs() < 1e-6);
    }
    let self_sim: f64 = out.row(0).iter().map(|v| v * v).sum();
    assert!((self_sim - 1.0).abs() < 1e-12);
    let cross: f64 = out.row(0).iter().zip(out.row(1)).map(|(a, b)| a * b).sum();
    assert!((-1.0..=1.0).contains(&cross));
}

#[test]
fn queue_is_fifo_and_bounded() {
    let k = 5;
    let mut q = EmbeddingQueue::new(k, 3).unwrap();
    assert!(q.is_empty());
    let first = unit_rows(k, 3, 6);
    q.push(&first, &[false; 5]).unwrap();
    let second = unit_rows(2, 3, 7);
    q.push(&second, &[true, false]).unwrap();
    assert_eq!(q.len(), k);
    let snap = q.snapshot();
    // The first two rows were evicted; the rest keep their order.
    for i in 0..3 {
        assert_eq!(snap.row(i), first.row(i + 2));
    }
    assert_eq!(snap.row(3), second.row(0));
    assert_eq!(q.newest().unwrap(), second.row(1));
    assert_eq!(q.manipulated_count(), 1);
    for _ in 0..10 {
        q.push(&second, &[false, false]).unwrap();
        assert!(q.len() <= k);
    }
}

#[test]
fn queue_rejects_non_unit_rows() {
    let mut q = EmbeddingQueue::new(4, 2).unwrap();
    let bad = Tensor::new(vec![1, 2], vec![2.0, 0.0]).unwrap();
    assert!(q.push(&bad, &[false]).is_err());
    assert!(q.is_empty());
}

#[test]
fn infonce_is_monotone_in_similarities() {
    let tau = 0.5;
    let base = infonce_oracle(0.2, &[0.1, -0.3], tau, true);
    let a = row(vec![1.0, 0.0, 0.0]);
    // s⁺ = 0.2, s⁻ = (0.1, −0.3) realized with unit vectors.
    let unit = |c: f64| vec![c, (1.0 - c * c).sqrt(), 0.0];
    let p = row(unit(0.2));
    let mut negs = Tensor::new(vec![2, 3], [unit(0.1), unit(-0.3)].concat()).unwrap();
    let l0 = eval_infonce(&a, &p, &negs, tau, Denominator::WithPositive);
    assert!((l0 - base).abs() < 1e-12);
    let l_pos = eval_infonce(&a, &row(unit(0.25)), &negs, tau, Denominator::WithPositive);
    assert!(l_pos < l0);
    negs.data_mut()[..3].copy_from_slice(&unit(0.15));
    let l_neg = eval_infonce(&a, &p, &negs, tau, Denominator::WithPositive);
    assert!(l_neg > l0);
}

struct MacFixture {
    store: ParamStore,
    head_v: ProjectionHead,
    head_t: ProjectionHead,
    v_in: Tensor,
    t_in: Tensor,
    v_mom: Tensor,
    t_mom: Tensor,
    qv: EmbeddingQueue,
    qt: EmbeddingQueue,
}

fn mac_fixture() -> MacFixture {
    let mut r = rng(8);
    let mut store = ParamStore::new();
    let head_v = ProjectionHead::new(&mut store, "hv", 6, 4, &mut r);
    let head_t = ProjectionHead::new(&mut store, "ht", 6, 4, &mut r);
    // Larger weights than the default init keep the gradients well away from zero.
    for t in store.tensors_mut() {
        t.data_mut().iter_mut().for_each(|x| *x *= 20.0);
    }
    let mut qv = EmbeddingQueue::new(6, 4).unwrap();
    let mut qt = EmbeddingQueue::new(6, 4).unwrap();
    qv.push(&unit_rows(6, 4, 9), &[true, false, true, false, false, false]).unwrap();
    qt.push(&unit_rows(6, 4, 10), &[false; 6]).unwrap();
    MacFixture {
        store,
        head_v,
        head_t,
        v_in: unit_rows(3, 6, 11),
        t_in: unit_rows(3, 6, 12),
        v_mom: unit_rows(3, 4, 13),
        t_mom: unit_rows(3, 4, 14),
        qv,
        qt,
    }
}

fn mac_value(f: &MacFixture, g: &mut Graph<'_>, anchors: &[usize], qv: &EmbeddingQueue) -> Result<Option<Var>> {
    let v = g.constant(f.v_in.clone());
    let t = g.constant(f.t_in.clone());
    let inputs = MacInputs {
        image_proj: f.head_v.forward(g, v)?,
        text_proj: f.head_t.forward(g, t)?,
        image_momentum: &f.v_mom,
        text_momentum: &f.t_mom,
        anchors,
        image_queue: qv,
        text_queue: &f.qt,
    };
    Ok(mac_loss(g, &inputs, Temperature::default(), Denominator::WithPositive)?.map(|(l, _)| l))
}

#[test]
fn mac_loss_averages_four_positive_terms() {
    let f = mac_fixture();
    let mut g = Graph::new(&f.store, false);
    let v = g.constant(f.v_in.clone());
    let t = g.constant(f.t_in.clone());
    let inputs = MacInputs {
        image_proj: f.head_v.forward(&mut g, v).unwrap(),
        text_proj: f.head_t.forward(&mut g, t).unwrap(),
        image_momentum: &f.v_mom,
        text_momentum: &f.t_mom,
        anchors: &[0, 2],
        image_queue: &f.qv,
        text_queue: &f.qt,
    };
    let (l, terms) = mac_loss(&mut g, &inputs, Temperature::default(), Denominator::WithPositive).unwrap().unwrap();
    let total = g.value(l).item();
    assert!((total - (terms.v2t + terms.t2v + terms.v2v + terms.t2t) / 4.0).abs() < 1e-12);
    for term in [terms.v2t, terms.t2v, terms.v2v, terms.t2t] {
        assert!(term > 0.0);
    }
}

#[test]
fn mac_loss_skips_batches_without_anchors() {
    let f = mac_fixture();
    let mut g = Graph::new(&f.store, false);
    assert!(mac_value(&f, &mut g, &[], &f.qv).unwrap().is_none());
    let empty = EmbeddingQueue::new(6, 4).unwrap();
    assert!(mac_value(&f, &mut g, &[0], &empty).unwrap().is_none());
}

#[test]
fn mac_loss_ignores_queue_order() {
    let f = mac_fixture();
    let mut g = Graph::new(&f.store, false);
    let l = mac_value(&f, &mut g, &[0, 1, 2], &f.qv).unwrap().unwrap();
    let base = g.value(l).item();
    let snap = f.qv.snapshot();
    let mut reordered = EmbeddingQueue::new(6, 4).unwrap();
    let perm = [3, 0, 5, 1, 4, 2];
    let data: Vec<f64> = perm.iter().flat_map(|&i| snap.row(i).to_vec()).collect();
    reordered.push(&Tensor::new(vec![6, 4], data).unwrap(), &[false; 6]).unwrap();
    let mut g = Graph::new(&f.store, false);
    let l = mac_value(&f, &mut g, &[0, 1, 2], &reordered).unwrap().unwrap();
    assert!((g.value(l).item() - base).abs() < 1e-12);
}

#[test]
fn mac_loss_gradients_match_finite_differences() {
    let f = mac_fixture();
    let check = param_gradcheck(
        &f.store,
        |g| mac_value(&f, g, &[0, 2], &f.qv).map(|l| l.unwrap()),
        1e-6,
        None,
    )
    .unwrap();
    assert!(check.passes(1e-4), "{check:?}");
}

proptest! {
    #[test]
    fn infonce_is_positive(seed in 0u64..1000, k in 1usize..12, tau in 0.05f64..2.0) {
        let a = unit_rows(2, 5, seed);
        let p = unit_rows(2, 5, seed + 1);
        let negs = unit_rows(k, 5, seed + 2);
        prop_assert!(eval_infonce(&a, &p, &negs, tau, Denominator::WithPositive) > 0.0);
    }
}
