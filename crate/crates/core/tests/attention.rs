use candle_core::{DType, Device, Tensor, Var};
use ctxseg::nn::{Mode, ParamStore};
use ctxseg::transformer::{
    attention_row_sums, cross_attention, msa, Attention, ContextBlock, ContextTransformer, PatchEmbed,
    TransformerConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
}

fn set(var: &Var, rows: &[&[f64]]) {
    let flat: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
    let t = Tensor::from_vec(flat, var.shape(), &Device::Cpu).unwrap();
    var.set(&t).unwrap();
}

fn zero(var: &Var) {
    var.set(&var.as_tensor().zeros_like().unwrap()).unwrap();
}

fn vec3(t: &Tensor) -> Vec<Vec<Vec<f64>>> {
    t.to_dtype(DType::F64).unwrap().squeeze(0).unwrap().to_vec3::<f64>().unwrap()
}

fn vec2(t: &Tensor) -> Vec<Vec<f64>> {
    t.to_dtype(DType::F64).unwrap().squeeze(0).unwrap().to_vec2::<f64>().unwrap()
}

fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    (a - b).unwrap().abs().unwrap().flatten_all().unwrap().max(0).unwrap().to_scalar::<f64>().unwrap()
}

/// Plain-loop attention for one head (`n = 1`) with bias-free projections
/// given as `[out][in]` matrices.
#[allow(clippy::type_complexity)]
fn scalar_attention(
    queries: &[Vec<f64>],
    keys: &[Vec<f64>],
    wq: &[Vec<f64>],
    wk: &[Vec<f64>],
    wv: &[Vec<f64>],
    wo: &[Vec<f64>],
) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let proj = |w: &[Vec<f64>], x: &[f64]| -> Vec<f64> {
        w.iter().map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum()).collect()
    };
    let d = wq.len() as f64;
    let q: Vec<_> = queries.iter().map(|x| proj(wq, x)).collect();
    let k: Vec<_> = keys.iter().map(|x| proj(wk, x)).collect();
    let v: Vec<_> = keys.iter().map(|x| proj(wv, x)).collect();
    let mut attn = Vec::new();
    let mut out = Vec::new();
    for qi in &q {
        let logits: Vec<f64> = k.iter().map(|kj| qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() / d.sqrt()).collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
        let z: f64 = e.iter().sum();
        let row: Vec<f64> = e.iter().map(|x| x / z).collect();
        let mixed: Vec<f64> = (0..wv.len()).map(|c| row.iter().zip(&v).map(|(a, vj)| a * vj[c]).sum()).collect();
        out.push(proj(wo, &mixed));
        attn.push(row);
    }
    (attn, out)
}

fn hand_attention(store: &ParamStore, wq: &[&[f64]], wk: &[&[f64]], wv: &[&[f64]], wo: &[&[f64]]) -> Attention {
    let a = Attention::new(&store.root(), 2, 1).unwrap();
    for (lin, w) in [(&a.q, wq), (&a.k, wk), (&a.v, wv), (&a.out, wo)] {
        set(&lin.weight, w);
        zero(&lin.bias);
    }
    a
}

fn owned(rows: &[&[f64]]) -> Vec<Vec<f64>> {
    rows.iter().map(|r| r.to_vec()).collect()
}

#[test]
fn attention_rows_sum_to_one_over_100_seeds() {
    for seed in 0..100u64 {
        let store = ParamStore::new(DType::F64, seed);
        let attn = Attention::new(&store.root(), 8, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tl = randn(&mut rng, &[2, 5, 8]);
        let tc = randn(&mut rng, &[2, 7, 8]);
        for a in [msa(&tl, &attn).unwrap().1, cross_attention(&tl, &tc, &attn).unwrap().1] {
            let sums = attention_row_sums(&a).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
            assert!(sums.iter().all(|s| (s - 1.0).abs() <= 1e-6), "seed {seed}: {sums:?}");
        }
    }
}

#[test]
fn cross_attention_on_itself_is_self_attention() {
    let store = ParamStore::new(DType::F64, 3);
    let attn = Attention::new(&store.root(), 8, 4).unwrap();
    let t = randn(&mut ChaCha8Rng::seed_from_u64(1), &[1, 6, 8]);
    let (out_s, a_s) = msa(&t, &attn).unwrap();
    let (out_c, a_c) = cross_attention(&t, &t, &attn).unwrap();
    assert!(max_abs_diff(&a_s, &a_c) <= 1e-6);
    assert!(max_abs_diff(&out_s, &out_c) <= 1e-6);
}

#[test]
fn two_token_self_attention_matches_scalar_oracle() {
    let store = ParamStore::new(DType::F64, 0);
    let (wq, wk, wv, wo): (&[&[f64]], &[&[f64]], &[&[f64]], &[&[f64]]) = (
        &[&[1.0, 0.5], &[-0.5, 2.0]],
        &[&[0.3, -1.0], &[1.0, 1.0]],
        &[&[2.0, 0.0], &[1.0, -1.0]],
        &[&[1.0, 0.0], &[0.0, 1.0]],
    );
    let attn = hand_attention(&store, wq, wk, wv, wo);
    let tokens: &[&[f64]] = &[&[1.0, 2.0], &[3.0, -1.0]];
    let t = Tensor::from_vec(owned(tokens).concat(), (1, 2, 2), &Device::Cpu).unwrap();
    let (out, a) = msa(&t, &attn).unwrap();
    let (a_ref, out_ref) = scalar_attention(&owned(tokens), &owned(tokens), &owned(wq), &owned(wk), &owned(wv), &owned(wo));
    let a = vec3(&a)[0].clone();
    let out = vec2(&out);
    for i in 0..2 {
        for j in 0..2 {
            assert!((a[i][j] - a_ref[i][j]).abs() <= 1e-8);
            assert!((out[i][j] - out_ref[i][j]).abs() <= 1e-8);
        }
    }
}

#[test]
fn cross_attention_n2_m3_matches_scalar_oracle() {
    let store = ParamStore::new(DType::F64, 0);
    let (wq, wk, wv, wo): (&[&[f64]], &[&[f64]], &[&[f64]], &[&[f64]]) = (
        &[&[1.0, 0.0], &[2.0, -1.0]],
        &[&[0.0, 1.0], &[1.0, 1.0]],
        &[&[1.0, 2.0], &[-1.0, 0.0]],
        &[&[0.0, 1.0], &[1.0, 1.0]],
    );
    let attn = hand_attention(&store, wq, wk, wv, wo);
    let local: &[&[f64]] = &[&[1.0, -1.0], &[0.0, 2.0]];
    let context: &[&[f64]] = &[&[1.0, 1.0], &[-2.0, 0.0], &[0.0, 3.0]];
    let tl = Tensor::from_vec(owned(local).concat(), (1, 2, 2), &Device::Cpu).unwrap();
    let tc = Tensor::from_vec(owned(context).concat(), (1, 3, 2), &Device::Cpu).unwrap();
    let (out, a) = cross_attention(&tl, &tc, &attn).unwrap();
    let (a_ref, out_ref) =
        scalar_attention(&owned(local), &owned(context), &owned(wq), &owned(wk), &owned(wv), &owned(wo));
    let a = vec3(&a)[0].clone();
    assert_eq!(a.len(), 2);
    assert_eq!(a[0].len(), 3);
    let out = vec2(&out);
    for i in 0..2 {
        for j in 0..3 {
            assert!((a[i][j] - a_ref[i][j]).abs() <= 1e-8, "A[{i}][{j}]");
        }
        for c in 0..2 {
            assert!((out[i][c] - out_ref[i][c]).abs() <= 1e-8, "out[{i}][{c}]");
        }
    }
}

#[test]
fn shrinking_queries_makes_rows_uniform() {
    let store = ParamStore::new(DType::F64, 5);
    let attn = Attention::new(&store.root(), 8, 2).unwrap();
    let s = 1e-6;
    attn.q.weight.set(&(attn.q.weight.as_tensor() * s).unwrap()).unwrap();
    attn.q.bias.set(&(attn.q.bias.as_tensor() * s).unwrap()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (tl, tc) = (randn(&mut rng, &[1, 4, 8]), randn(&mut rng, &[1, 9, 8]));
    let a = cross_attention(&tl, &tc, &attn).unwrap().1.flatten_all().unwrap().to_vec1::<f64>().unwrap();
    let dev = a.iter().map(|v| (v - 1.0 / 9.0).abs()).fold(0.0, f64::max);
    assert!(dev < 1e-4, "max deviation {dev}");
}

#[test]
fn singleton_and_constant_keys() {
    let store = ParamStore::new(DType::F64, 9);
    let attn = Attention::new(&store.root(), 4, 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    // One token attending to itself: A = [[1]], output = out(v(t)).
    let t = randn(&mut rng, &[1, 1, 4]);
    let (out, a) = msa(&t, &attn).unwrap();
    assert!((a.flatten_all().unwrap().to_vec1::<f64>().unwrap()[0] - 1.0).abs() < 1e-15);
    let expect = attn.out.forward(&attn.v.forward(&t).unwrap()).unwrap();
    assert!(max_abs_diff(&out, &expect) < 1e-12);

    // Identical keys: uniform rows, every output row is the same.
    let tl = randn(&mut rng, &[1, 3, 4]);
    let key = randn(&mut rng, &[1, 1, 4]);
    let tc = key.repeat((1, 5, 1)).unwrap();
    let (out, a) = cross_attention(&tl, &tc, &attn).unwrap();
    for v in a.flatten_all().unwrap().to_vec1::<f64>().unwrap() {
        assert!((v - 0.2).abs() < 1e-12);
    }
    let rows = vec2(&out);
    for r in &rows[1..] {
        for (x, y) in r.iter().zip(&rows[0]) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    // M = 1: all local tokens receive the same projected context value.
    let (out, _) = cross_attention(&tl, &key, &attn).unwrap();
    let expect = attn.out.forward(&attn.v.forward(&key).unwrap()).unwrap();
    for r in vec2(&out) {
        for (x, y) in r.iter().zip(&vec2(&expect)[0]) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

fn cfg(depth: usize) -> TransformerConfig {
    TransformerConfig { depth, heads: 2, dim: 8, ..Default::default() }
}

#[test]
fn zeroed_update_projections_make_a_block_the_identity() {
    let store = ParamStore::new(DType::F64, 1);
    let block = ContextBlock::new(&store.root(), &cfg(1), true, 0).unwrap();
    zero(&block.attn.out.weight);
    zero(&block.attn.out.bias);
    zero(&block.mlp.fc2.weight);
    zero(&block.mlp.fc2.bias);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (tl, tc) = (randn(&mut rng, &[1, 4, 8]), randn(&mut rng, &[1, 6, 8]));
    let out = block.forward(&tl, &tc, Mode::Eval).unwrap();
    assert_eq!(max_abs_diff(&out, &tl), 0.0);
}

#[test]
fn transformer_is_the_composition_of_its_blocks() {
    let store = ParamStore::new(DType::F64, 2);
    let t = ContextTransformer::new(&store.root(), &cfg(3), (6, (2, 3)), (5, (3, 3))).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (fl, fc) = (randn(&mut rng, &[1, 6, 2, 3]), randn(&mut rng, &[1, 5, 3, 3]));
    let (local_out, ctx_out) = t.forward(&fl, &fc, Mode::Eval).unwrap();
    let (tl, tc) = t.embed(&fl, &fc).unwrap();
    let mut tokens = tl.tokens.clone();
    for b in &t.blocks {
        tokens = b.forward(&tokens, &tc.tokens, Mode::Eval).unwrap();
    }
    let manual = ctxseg::transformer::TokenSequence { tokens, ..tl };
    assert_eq!(max_abs_diff(&manual.to_feature_map().unwrap(), &local_out), 0.0);
    // Context tokens pass through unchanged.
    assert_eq!(max_abs_diff(&tc.to_feature_map().unwrap(), &ctx_out), 0.0);
}

#[test]
fn zero_depth_returns_embedded_features() {
    let store = ParamStore::new(DType::F64, 2);
    let t = ContextTransformer::new(&store.root(), &cfg(0), (6, (2, 3)), (5, (3, 3))).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (fl, fc) = (randn(&mut rng, &[1, 6, 2, 3]), randn(&mut rng, &[1, 5, 3, 3]));
    let (local_out, _) = t.forward(&fl, &fc, Mode::Eval).unwrap();
    let (tl, _) = t.embed(&fl, &fc).unwrap();
    assert_eq!(max_abs_diff(&tl.to_feature_map().unwrap(), &local_out), 0.0);
    assert_eq!(local_out.dims(), &[1, 8, 2, 3]);
}

#[test]
fn permuting_context_positions_with_their_table_is_invisible() {
    let store = ParamStore::new(DType::F64, 6);
    let t = ContextTransformer::new(&store.root(), &cfg(2), (4, (2, 2)), (3, (3, 4))).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let fl = randn(&mut rng, &[1, 4, 2, 2]);
    let fc = randn(&mut rng, &[1, 3, 3, 4]);
    let (before, _) = t.forward(&fl, &fc, Mode::Eval).unwrap();

    let m = 12;
    let mut perm: Vec<usize> = (0..m).collect();
    for i in (1..m).rev() {
        perm.swap(i, rng.random_range(0..=i));
    }
    let cells = fc.reshape((3, m)).unwrap().to_vec2::<f64>().unwrap();
    let permuted: Vec<f64> = cells.iter().flat_map(|ch| perm.iter().map(move |&p| ch[p])).collect();
    let fc_p = Tensor::from_vec(permuted, (1, 3, 3, 4), &Device::Cpu).unwrap();
    let pos = t.context_embed.as_ref().unwrap().pos.clone();
    let rows = pos.as_tensor().to_vec2::<f64>().unwrap();
    let pos_p: Vec<f64> = perm.iter().flat_map(|&p| rows[p].clone()).collect();
    pos.set(&Tensor::from_vec(pos_p, (m, 8), &Device::Cpu).unwrap()).unwrap();

    let (after, _) = t.forward(&fl, &fc_p, Mode::Eval).unwrap();
    assert!(max_abs_diff(&before, &after) < 1e-12);
}

#[test]
fn identity_projection_lays_tokens_out_row_major() {
    let store = ParamStore::new(DType::F64, 0);
    let (c, d, h, w) = (6, 4, 3, 5);
    let pe = PatchEmbed::new(&store.root(), c, (h, w), 1, d).unwrap();
    let eye: Vec<f64> = (0..d).flat_map(|o| (0..c).map(move |i| if i == o { 1.0 } else { 0.0 })).collect();
    pe.proj.weight.set(&Tensor::from_vec(eye, (d, c), &Device::Cpu).unwrap()).unwrap();
    zero(&pe.proj.bias);
    zero(&pe.pos);
    let f = randn(&mut ChaCha8Rng::seed_from_u64(3), &[1, c, h, w]);
    let tokens = vec2(&pe.forward(&f).unwrap().tokens);
    let fv = f.squeeze(0).unwrap().to_vec3::<f64>().unwrap();
    for y in 0..h {
        for x in 0..w {
            for ch in 0..d {
                assert_eq!(tokens[y * w + x][ch], fv[ch][y][x]);
            }
        }
    }
}
