mod common;

use candle_core::{DType, Device, Tensor, Var};
use common::*;
use proptest::prelude::*;
use rgbx_core::attention::{attend, AttentionConfig, MultiHeadAttention, TokenTensor};
use rgbx_core::gradcheck;
use rgbx_core::nn::{seeded_rng, Builder, Registry};
use rgbx_core::prompt::{prompted_attention, ControlPromptGenerator, PromptBundle};

fn mha(d: usize, heads: usize, seed: u64) -> MultiHeadAttention {
    let mut reg = Registry::new();
    let mut r = seeded_rng(seed);
    MultiHeadAttention::new(&mut Builder::new(&mut reg, &mut r, DType::F64).pp("a"), AttentionConfig::new(d, heads).unwrap()).unwrap()
}

#[test]
fn attend_matches_loop_oracle() {
    let mut r = rng(1);
    for heads in [1, 2, 4] {
        let (q, k, v) = (randn(&mut r, &[3, 5, 8], 1.0), randn(&mut r, &[3, 7, 8], 1.0), randn(&mut r, &[3, 7, 8], 1.0));
        let (out, w) = attend(&q, &k, &v, heads).unwrap();
        let (q, k, v) = (mat3(&q), mat3(&k), mat3(&v));
        let expect: Vec<Mat> = (0..3).map(|b| common::attend(&q[b], &k[b], &v[b], heads)).collect();
        assert!(max_diff(&mat3(&out), &expect) < 1e-12);
        let rows = w.sum(3).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert!(rows.iter().all(|s| (s - 1.0).abs() < 1e-12));
    }
}

#[test]
fn empty_bundle_is_bit_identical_to_self_attention() {
    let a = mha(16, 4, 3);
    let e = randn(&mut rng(2), &[2, 9, 16], 1.0);
    let p = prompted_attention(&e, &PromptBundle::empty(), &a).unwrap();
    let s = a.mhsa(&TokenTensor::new(e.clone()).unwrap()).unwrap();
    let (p, s) = (p.flatten_all().unwrap().to_vec1::<f64>().unwrap(), s.tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap());
    assert!(p.iter().zip(&s).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn control_prompts_are_shaped_per_stage() {
    let mut reg = Registry::new();
    let mut r = seeded_rng(0);
    let g = ControlPromptGenerator::new(&mut Builder::new(&mut reg, &mut r, DType::F64).pp("p"), 6, &[4, 8], 3).unwrap();
    let s = randn(&mut rng(0), &[2, 6], 1.0);
    assert_eq!(g.make_control_prompts(&s, 1).unwrap().dims(), &[2, 3, 4]);
    assert_eq!(g.make_control_prompts(&s, 2).unwrap().dims(), &[2, 3, 8]);
    assert!(g.make_control_prompts(&s, 3).is_err());
}

#[test]
fn attention_gradient_matches_finite_differences() {
    let a = mha(8, 2, 5);
    let x = Var::from_tensor(&randn(&mut rng(6), &[2, 5, 8], 1.0)).unwrap();
    let m = randn(&mut rng(7), &[3, 8], 1.0);
    let w = randn(&mut rng(8), &[2, 5, 8], 1.0);
    let idx: Vec<usize> = (0..80).step_by(3).collect();
    let rep = gradcheck::check(&x, &idx, 1e-5, 1e-6, || {
        let o = prompted_attention(x.as_tensor(), &PromptBundle::new(None, Some(m.clone())), &a)?;
        Ok((o * &w)?.sum_all()?)
    })
    .unwrap();
    assert!(rep.max_rel_err < 1e-4, "{rep:?}");
}

#[test]
fn prompts_change_outputs_but_not_shape() {
    let a = mha(8, 2, 9);
    let e = randn(&mut rng(10), &[1, 4, 8], 1.0);
    let m = Tensor::ones((2, 8), DType::F64, &Device::Cpu).unwrap();
    let p = prompted_attention(&e, &PromptBundle::new(None, Some(m)), &a).unwrap();
    let s = a.self_attend(&e).unwrap();
    assert_eq!(p.dims(), s.dims());
    assert!(max_diff_t(&p, &s) > 1e-6);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]
    #[test]
    fn prompted_attention_matches_full_rows_and_recomposition(seed in any::<u64>()) {
        let (rows, recomposed, looped) = prompt_attention_case(seed);
        prop_assert!(rows < 1e-6, "rows {rows}");
        prop_assert!(recomposed < 1e-6, "recomposition {recomposed}");
        prop_assert!(looped < 1e-6, "loop oracle {looped}");
    }
}
