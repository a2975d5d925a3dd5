use cacvit_core::attention::{
    token_maps,
    attention_forward, decouple, match_similarity, retile, stack_blocks, AttentionOptions, DecoupledAttention,
    EncoderBlock, TokenSequence, LN_EPS,
};
use cacvit_core::gradcheck::{grad_check_coords, Coord, GradCheckOptions};
use cacvit_core::{ParamRng, Tensor};
use proptest::prelude::*;

fn random_tokens(t: usize, d: usize, seed: u64) -> Tensor {
    Tensor::randn(&[t, d], 1.0, &mut ParamRng::new(seed))
}

/// Bigger-than-default weights so attention is far from uniform.
fn sharp_block(dim: usize, heads: usize, seed: u64) -> EncoderBlock {
    let mut rng = ParamRng::new(seed);
    let mut b = EncoderBlock::new(dim, heads, &mut rng).unwrap();
    for w in [&mut b.w_q, &mut b.w_k, &mut b.w_v] {
        *w = Tensor::randn(w.shape(), 0.5, &mut rng);
    }
    b
}

/// Plain-loop attention map of the first sub-layer: LN, Q/K projections,
/// per-head scaled dot products and a row softmax (optionally masking the
/// query→exemplar block).
fn reference_map(x: &Tensor, b: &EncoderBlock, m: usize, mask_class: bool) -> Vec<Vec<Vec<f64>>> {
    let (t, d) = (x.shape()[0], x.shape()[1]);
    let dh = d / b.heads;
    let mut h = vec![vec![0.0; d]; t];
    for i in 0..t {
        let row: Vec<f64> = (0..d).map(|j| x.at2(i, j)).collect();
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
        for j in 0..d {
            h[i][j] = (row[j] - mean) / (var + LN_EPS).sqrt() * b.ln1_gain.data()[j] + b.ln1_bias.data()[j];
        }
    }
    let proj = |w: &Tensor, bias: &Tensor| -> Vec<Vec<f64>> {
        (0..t)
            .map(|i| (0..d).map(|o| bias.data()[o] + (0..d).map(|j| h[i][j] * w.at2(j, o)).sum::<f64>()).collect())
            .collect()
    };
    let q = proj(&b.w_q, &b.b_q);
    let k = proj(&b.w_k, &b.b_k);
    (0..b.heads)
        .map(|hd| {
            (0..t)
                .map(|i| {
                    let logits: Vec<Option<f64>> = (0..t)
                        .map(|j| {
                            if mask_class && i < m && j >= m {
                                None
                            } else {
                                let dot: f64 = (hd * dh..(hd + 1) * dh).map(|c| q[i][c] * k[j][c]).sum();
                                Some(dot / (dh as f64).sqrt())
                            }
                        })
                        .collect();
                    let max = logits.iter().flatten().fold(f64::NEG_INFINITY, |a, b| a.max(*b));
                    let z: f64 = logits.iter().flatten().map(|l| (l - max).exp()).sum();
                    logits.iter().map(|l| l.map_or(0.0, |l| (l - max).exp() / z)).collect()
                })
                .collect()
        })
        .collect()
}

#[test]
fn zero_qk_projections_give_uniform_rows() {
    let mut b = EncoderBlock::new(8, 2, &mut ParamRng::new(1)).unwrap();
    b.w_q = Tensor::zeros(&[8, 8]);
    b.w_k = Tensor::zeros(&[8, 8]);
    let seq = TokenSequence::new(random_tokens(7, 8, 2), 4, 1, 3).unwrap();
    let (_, att) = attention_forward(&seq, &b, AttentionOptions::default()).unwrap();
    let full = retile(&att);
    assert!(full.data().iter().all(|v| (v - 1.0 / 7.0).abs() < 1e-15));
}

#[test]
fn single_token_attends_to_itself() {
    let b = sharp_block(4, 2, 3);
    let x = random_tokens(1, 4, 4);
    let seq = TokenSequence::new(x.clone(), 1, 0, 0).unwrap();
    let (out, att) = attention_forward(&seq, &b, AttentionOptions::default()).unwrap();
    assert_eq!(att.a_query.data(), &[1.0, 1.0]);
    assert_eq!(att.a_class.len(), 0);

    // attention output is exactly the V path: LN(x)·W_v·W_o (zero biases), then the MLP
    let mut tape = cacvit_core::Tape::new();
    let xv = tape.constant(&x).unwrap();
    let g = tape.constant(&b.ln1_gain).unwrap();
    let bb = tape.constant(&b.ln1_bias).unwrap();
    let h = tape.layer_norm(xv, g, bb, LN_EPS).unwrap();
    let wv = tape.constant(&b.w_v).unwrap();
    let wo = tape.constant(&b.w_o).unwrap();
    let v = tape.matmul(h, wv).unwrap();
    let o = tape.matmul(v, wo).unwrap();
    let x1 = tape.add(xv, o).unwrap();
    let g2 = tape.constant(&b.ln2_gain).unwrap();
    let b2 = tape.constant(&b.ln2_bias).unwrap();
    let h2 = tape.layer_norm(x1, g2, b2, LN_EPS).unwrap();
    let w1 = tape.constant(&b.w_fc1).unwrap();
    let w2 = tape.constant(&b.w_fc2).unwrap();
    let f = tape.matmul(h2, w1).unwrap();
    let f = tape.gelu(f).unwrap();
    let f = tape.matmul(f, w2).unwrap();
    let want = tape.add(x1, f).unwrap();
    for (a, w) in out.tokens.data().iter().zip(tape.value(want)) {
        assert!((a - w).abs() < 1e-14);
    }
}

#[test]
fn blocks_retile_to_reference_map() {
    let b = sharp_block(12, 3, 5);
    let x = random_tokens(6, 12, 6);
    let seq = TokenSequence::new(x.clone(), 4, 1, 2).unwrap();
    let (_, att) = attention_forward(&seq, &b, AttentionOptions::default()).unwrap();
    let reference = reference_map(&x, &b, 4, false);
    let full = retile(&att);
    for hd in 0..3 {
        for i in 0..6 {
            for j in 0..6 {
                assert!((full.at3(hd, i, j) - reference[hd][i][j]).abs() < 1e-12);
            }
        }
    }
    // decouple is pure slicing: re-tiling is bit-exact
    assert_eq!(decouple(&full, 4, 2).unwrap(), att);
}

#[test]
fn decouple_indexing_and_uniform_map() {
    let t = 6;
    let data: Vec<f64> = (0..t * t).map(|i| i as f64).collect();
    let full = Tensor::new(vec![1, t, t], data).unwrap();
    let att = decouple(&full, 4, 2).unwrap();
    assert_eq!(att.a_query.shape(), &[1, 4, 4]);
    assert_eq!(&att.a_query.data()[..4], &[0.0, 1.0, 2.0, 3.0]);
    assert_eq!(&att.a_query.data()[4..8], &[6.0, 7.0, 8.0, 9.0]);
    assert_eq!(att.a_class.data()[..2], [4.0, 5.0]);
    assert_eq!(att.a_match.data()[..4], [24.0, 25.0, 26.0, 27.0]);
    assert_eq!(att.a_exp.data(), &[28.0, 29.0, 34.0, 35.0]);
    assert!(decouple(&full, 4, 3).is_err());

    let uniform = Tensor::filled(&[2, t, t], 1.0 / t as f64);
    let att = decouple(&uniform, 4, 2).unwrap();
    for block in [&att.a_query, &att.a_class, &att.a_match, &att.a_exp] {
        assert!(block.data().iter().all(|v| *v == 1.0 / t as f64));
    }
    let sim = match_similarity(&att).unwrap();
    assert!(sim.data().iter().all(|v| (v - 1.0 / t as f64).abs() < 1e-15));
}

#[test]
fn query_rows_split_across_two_blocks_sum_to_one() {
    let b = sharp_block(8, 2, 7);
    let seq = TokenSequence::new(random_tokens(9, 8, 8), 5, 2, 2).unwrap();
    let (_, att) = attention_forward(&seq, &b, AttentionOptions::default()).unwrap();
    for h in 0..2 {
        for i in 0..5 {
            let s: f64 = (0..5).map(|j| att.a_query.at3(h, i, j)).sum::<f64>()
                + (0..4).map(|j| att.a_class.at3(h, i, j)).sum::<f64>();
            assert!((s - 1.0).abs() < 1e-10);
        }
    }
}

#[test]
fn similarity_of_single_head_single_exemplar_token_is_that_row() {
    let b = sharp_block(6, 1, 9);
    let seq = TokenSequence::new(random_tokens(5, 6, 10), 4, 1, 1).unwrap();
    let (_, att) = attention_forward(&seq, &b, AttentionOptions::default()).unwrap();
    let sim = match_similarity(&att).unwrap();
    assert_eq!(sim.data(), att.a_match.data());
    assert!(sim.data().iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn similarity_requires_an_exemplar() {
    let b = sharp_block(4, 1, 11);
    let seq = TokenSequence::new(random_tokens(3, 4, 12), 3, 2, 0).unwrap();
    let (_, att) = attention_forward(&seq, &b, AttentionOptions::default()).unwrap();
    assert!(match_similarity(&att).is_err());
}

#[test]
fn head_divisibility_is_a_config_error() {
    assert!(matches!(
        EncoderBlock::new(10, 3, &mut ParamRng::new(0)),
        Err(cacvit_core::Error::Config(_))
    ));
}

#[test]
fn stack_depth_one_equals_single_block_and_preserves_segments() {
    let blocks: Vec<EncoderBlock> = (0..3).map(|s| sharp_block(8, 2, 20 + s)).collect();
    let seq = TokenSequence::new(random_tokens(10, 8, 13), 4, 3, 2).unwrap();
    let one = stack_blocks(&seq, &blocks[..1], AttentionOptions::default()).unwrap();
    let direct = attention_forward(&seq, &blocks[0], AttentionOptions::default()).unwrap();
    assert_eq!(one, direct);
    let (out, att) = stack_blocks(&seq, &blocks, AttentionOptions::default()).unwrap();
    assert_eq!((out.m_query, out.m_exemplar_each, out.k_shots), (4, 3, 2));
    assert_eq!(out.tokens.shape(), &[10, 8]);
    assert_eq!(att.a_match.shape(), &[2, 6, 4]);
    assert!(stack_blocks(&seq, &[], AttentionOptions::default()).is_err());
}

#[test]
fn class_masking_zeroes_a_class_and_renormalizes_query_rows() {
    let blocks: Vec<EncoderBlock> = (0..2).map(|s| sharp_block(8, 2, 30 + s)).collect();
    let seq = TokenSequence::new(random_tokens(9, 8, 14), 5, 2, 2).unwrap();
    let opts = AttentionOptions { mask_class: true };
    let (mid, _) = attention_forward(&seq, &blocks[0], opts).unwrap();
    let (_, att) = attention_forward(&mid, &blocks[1], opts).unwrap();
    assert!(att.a_class.data().iter().all(|v| *v == 0.0));
    let reference = reference_map(&mid.tokens, &blocks[1], 5, true);
    for h in 0..2 {
        for i in 0..5 {
            let s: f64 = (0..5).map(|j| att.a_query.at3(h, i, j)).sum();
            assert!((s - 1.0).abs() < 1e-10);
            for j in 0..5 {
                assert!((att.a_query.at3(h, i, j) - reference[h][i][j]).abs() < 1e-12);
            }
        }
    }
    let (_, stacked) = stack_blocks(&seq, &blocks, opts).unwrap();
    assert_eq!(stacked, att);
}

fn permute_exemplars(seq: &TokenSequence, order: &[usize]) -> TokenSequence {
    let d = seq.dim();
    let mut data = seq.tokens.data()[..seq.m_query * d].to_vec();
    for &k in order {
        let start = (seq.m_query + k * seq.m_exemplar_each) * d;
        data.extend_from_slice(&seq.tokens.data()[start..start + seq.m_exemplar_each * d]);
    }
    TokenSequence::new(Tensor::new(vec![seq.len(), d], data).unwrap(), seq.m_query, seq.m_exemplar_each, seq.k_shots)
        .unwrap()
}

#[test]
fn exemplar_permutation_equivariance() {
    let blocks: Vec<EncoderBlock> = (0..2).map(|s| sharp_block(8, 2, 40 + s)).collect();
    let seq = TokenSequence::new(random_tokens(4 + 3 * 2, 8, 15), 4, 2, 3).unwrap();
    let order = [2, 0, 1];
    let (_, a) = stack_blocks(&seq, &blocks, AttentionOptions::default()).unwrap();
    let (_, b) = stack_blocks(&permute_exemplars(&seq, &order), &blocks, AttentionOptions::default()).unwrap();
    let (m, mz, heads) = (4, 2, 2);
    let perm_row = |r: usize| order[r / mz] * mz + r % mz; // permuted row -> original row
    for h in 0..heads {
        for r in 0..6 {
            for j in 0..m {
                assert!((b.a_match.at3(h, r, j) - a.a_match.at3(h, perm_row(r), j)).abs() < 1e-12);
            }
            for c in 0..6 {
                assert!((b.a_exp.at3(h, r, c) - a.a_exp.at3(h, perm_row(r), perm_row(c))).abs() < 1e-12);
            }
        }
    }
    let (sa, sb) = (match_similarity(&a).unwrap(), match_similarity(&b).unwrap());
    for (x, y) in sa.data().iter().zip(sb.data()) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn encoder_block_gradients_match_finite_differences() {
    let block = sharp_block(8, 2, 50);
    let x = random_tokens(7, 8, 51);
    let target = random_tokens(7, 8, 52);
    let mut inputs = vec![x];
    inputs.extend(block.params().iter().map(|(_, t)| (*t).clone()));
    let f = |tape: &mut cacvit_core::Tape, v: &[cacvit_core::Var]| {
        use cacvit_core::attention::{block_forward, SeqVar};
        let bound = bind_from_vars(&block, v);
        let seq = SeqVar { tokens: v[0], m_query: 4, m_exemplar_each: 3, k_shots: 1 };
        let (out, maps) = block_forward(tape, &seq, &bound, AttentionOptions::default())?;
        let tgt = tape.constant(&target)?;
        let diff = tape.sub(out.tokens, tgt)?;
        let sq = tape.mul(diff, diff)?;
        let loss = tape.mean(sq)?;
        let sim = cacvit_core::attention::match_similarity_var(tape, &maps.heads, 4)?;
        let s = tape.sum(sim)?;
        let s = tape.scale(s, 3.0)?;
        let total = tape.concat(&[loss, s], 0)?;
        tape.sum(total)
    };
    let coords: Vec<Coord> = inputs
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.len()).step_by(3).map(move |index| Coord { input: i, index }))
        .collect();
    let report = grad_check_coords(f, &inputs, &coords, GradCheckOptions::default(), |_| {}).unwrap();
    assert!(report.passed(), "max rel err {} at {:?}", report.max_rel_err, report.worst);
    assert!(report.checked > 300);
}

/// Rebinds block parameters from the gradient-check input vars (index 1..).
fn bind_from_vars(block: &EncoderBlock, v: &[cacvit_core::Var]) -> cacvit_core::attention::BlockVars {
    cacvit_core::attention::BlockVars::from_vars(block.dim, block.heads, &v[1..17]).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn retile_is_bit_exact_and_rows_normalize(m in 1usize..10, mz in 0usize..4, k in 1usize..3, heads in 1usize..4, seed in 0u64..1000) {
        let dim = 4 * heads;
        let t = m + mz * k;
        let b = sharp_block(dim, heads, seed);
        let seq = TokenSequence::new(random_tokens(t, dim, seed + 1), m, mz, k).unwrap();
        let (_, att): (_, DecoupledAttention) = attention_forward(&seq, &b, AttentionOptions::default()).unwrap();
        let full = retile(&att);
        prop_assert_eq!(&decouple(&full, m, mz * k).unwrap(), &att);
        for h in 0..heads {
            for i in 0..t {
                let s: f64 = (0..t).map(|j| full.at3(h, i, j)).sum();
                prop_assert!((s - 1.0).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn softmax_rows_shift_invariance(row in proptest::collection::vec(-30.0f64..30.0, 1..9), shift in -50.0f64..50.0) {
        let mut tape = cacvit_core::Tape::new();
        let n = row.len();
        let a = tape.constant(&Tensor::new(vec![1, n], row.clone()).unwrap()).unwrap();
        let b = tape.constant(&Tensor::new(vec![1, n], row.iter().map(|v| v + shift).collect()).unwrap()).unwrap();
        let sa = tape.softmax_rows(a).unwrap();
        let sb = tape.softmax_rows(b).unwrap();
        let (va, vb) = (tape.value(sa).to_vec(), tape.value(sb).to_vec());
        prop_assert!((va.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for (x, y) in va.iter().zip(&vb) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }
}

#[test]
fn token_maps_of_uniform_attention_are_flat() {
    let (m, mz) = (4, 3);
    let t = m + mz;
    let full = Tensor::filled(&[2, t, t], 1.0 / t as f64);
    let att = decouple(&full, m, mz).unwrap();
    let [query, matched, class] = token_maps(&att);
    for v in query.iter().chain(&matched).chain(&class) {
        assert!((v - 1.0 / t as f64).abs() < 1e-15);
    }
    assert_eq!(matched, match_similarity(&att).unwrap().data());
}
