use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use relpatch::fixture::{random_model, random_model_with};
use relpatch::model::{
    CacheKey, CaptureSet, Model, ModelConfig, Site, StoragePrecision, TokenSequence, WeightMatrix, Weights,
};
use relpatch::Error;

fn random_tokens(rng: &mut ChaCha8Rng, vocab: usize, n: usize) -> TokenSequence {
    TokenSequence::new((0..n).map(|_| rng.gen_range(0..vocab as u32)).collect())
}

fn close(a: f32, b: f32, rel: f32) -> bool {
    (a - b).abs() <= rel * a.abs().max(b.abs()).max(1.0)
}

/// Straight-line f64 forward pass used as an independent oracle.
fn oracle_logits(model: &Model, tokens: &[u32]) -> Vec<Vec<f64>> {
    let cfg = model.config();
    let w = model.weights();
    let d = cfg.d_model;
    let hd = cfg.head_dim();
    let n = tokens.len();
    let get = |m: &WeightMatrix, r: usize, c: usize| m.get(r, c) as f64;
    let matvec = |m: &WeightMatrix, x: &[f64]| -> Vec<f64> {
        (0..m.rows()).map(|r| (0..m.cols()).map(|c| get(m, r, c) * x[c]).sum()).collect()
    };
    let norm = |x: &[f64], g: &[f32]| -> Vec<f64> {
        let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
        let r = 1.0 / (ms + cfg.norm_eps).sqrt();
        x.iter().zip(g).map(|(v, g)| v * r * *g as f64).collect()
    };
    let rope = |x: &mut [f64], pos: usize| {
        let half = hd / 2;
        for i in 0..half {
            let f = cfg.rope_theta.powf(-(2.0 * i as f64) / hd as f64);
            let (s, c) = (pos as f64 * f).sin_cos();
            let (a, b) = (x[i], x[i + half]);
            x[i] = a * c - b * s;
            x[i + half] = b * c + a * s;
        }
    };

    let mut resid: Vec<Vec<f64>> = tokens
        .iter()
        .map(|&t| (0..d).map(|c| get(&w.embed, t as usize, c)).collect())
        .collect();
    for lw in &w.layers {
        let xn: Vec<Vec<f64>> = resid.iter().map(|x| norm(x, &lw.attn_norm)).collect();
        let q: Vec<Vec<f64>> = xn.iter().map(|x| matvec(&lw.wq, x)).collect();
        let k: Vec<Vec<f64>> = xn.iter().map(|x| matvec(&lw.wk, x)).collect();
        let v: Vec<Vec<f64>> = xn.iter().map(|x| matvec(&lw.wv, x)).collect();
        let mut attn = vec![vec![0.0; d]; n];
        for h in 0..cfg.n_heads {
            let g = h / cfg.group_size();
            for t in 0..n {
                let mut qt = q[t][h * hd..(h + 1) * hd].to_vec();
                rope(&mut qt, t);
                let mut scores = Vec::new();
                for s in 0..=t {
                    let mut ks = k[s][g * hd..(g + 1) * hd].to_vec();
                    rope(&mut ks, s);
                    scores.push(qt.iter().zip(&ks).map(|(a, b)| a * b).sum::<f64>() / (hd as f64).sqrt());
                }
                let m = scores.iter().cloned().fold(f64::MIN, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                let z_sum: f64 = e.iter().sum();
                let mut z = vec![0.0; hd];
                for s in 0..=t {
                    for i in 0..hd {
                        z[i] += e[s] / z_sum * v[s][g * hd + i];
                    }
                }
                for r in 0..d {
                    attn[t][r] += (0..hd).map(|i| get(&lw.wo, r, h * hd + i) * z[i]).sum::<f64>();
                }
            }
        }
        for t in 0..n {
            for r in 0..d {
                resid[t][r] += attn[t][r];
            }
            let x2 = norm(&resid[t], &lw.mlp_norm);
            let gate = matvec(&lw.w_gate, &x2);
            let up = matvec(&lw.w_up, &x2);
            let act: Vec<f64> = gate.iter().zip(&up).map(|(g, u)| g / (1.0 + (-g).exp()) * u).collect();
            let down = matvec(&lw.w_down, &act);
            for r in 0..d {
                resid[t][r] += down[r];
            }
        }
    }
    let u = w.unembed_matrix();
    resid
        .iter()
        .map(|x| {
            let xn = norm(x, &w.final_norm);
            matvec(u, &xn)
                .into_iter()
                .zip(&w.unembed_bias)
                .map(|(l, b)| l + *b as f64)
                .collect()
        })
        .collect()
}

#[test]
fn decomposition_holds_on_random_prompts() {
    let model = random_model(7).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..50 {
        let n = rng.gen_range(2..24);
        let tokens = random_tokens(&mut rng, 512, n);
        let out = model.forward(&tokens, &CaptureSet::all()).unwrap();
        let c = &out.cache;
        let emb = model.embed(&tokens).unwrap();
        for l in 0..model.n_layers() {
            let attn = c.get(&CacheKey::attn_out(l)).unwrap();
            let mut sum = vec![0.0f32; attn.as_slice().len()];
            for h in 0..model.n_heads() {
                for (s, v) in sum.iter_mut().zip(c.get(&CacheKey::head_out(l, h)).unwrap().as_slice()) {
                    *s += v;
                }
                let p = c.get(&CacheKey::pattern(l, h)).unwrap();
                for t in 0..n {
                    let row = p.row(t);
                    assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-5);
                    assert!(row[t + 1..].iter().all(|&x| x == 0.0));
                }
            }
            for (a, b) in sum.iter().zip(attn.as_slice()) {
                assert!(close(*a, *b, 1e-4), "{a} vs {b}");
            }
            let prev = if l == 0 { &emb } else { c.get(&CacheKey::resid(l - 1)).unwrap() };
            let mlp = c.get(&CacheKey::mlp_out(l)).unwrap();
            let cur = c.get(&CacheKey::resid(l)).unwrap();
            for i in 0..cur.as_slice().len() {
                let want = prev.as_slice()[i] + attn.as_slice()[i] + mlp.as_slice()[i];
                assert!(close(cur.as_slice()[i], want, 1e-4));
            }
        }
    }
}

#[test]
fn matches_straight_line_oracle() {
    let mut cfg = ModelConfig::new(2, 4, 2, 32, 48, 64);
    cfg.rope_theta = 500.0;
    let model = random_model_with(cfg, 3, 0.2).unwrap();
    let tokens = [5u32, 17, 63, 0, 9, 9, 41];
    let want = oracle_logits(&model, &tokens);
    let got = model.forward(&TokenSequence::new(tokens.to_vec()), &CaptureSet::none()).unwrap();
    for (t, row) in want.iter().enumerate() {
        for (v, w) in got.logits.at(t).unwrap().iter().zip(row) {
            assert!((*v as f64 - w).abs() < 1e-4 * w.abs().max(1.0), "{v} vs {w}");
        }
    }
}

/// One layer: embeddings are scaled one-hots, value/output projections are
/// identities, queries and keys are zero (uniform attention), no MLP, and the
/// unembedding is the identity on the first `d` tokens.
fn identity_like_model() -> Model {
    let d = 8;
    let cfg = ModelConfig::new(1, 2, 2, d, 4, 16);
    let mut w = Weights::zeros(&cfg);
    let e = w.embed.as_f32_mut().unwrap();
    for t in 0..16 {
        e[t * d + t % d] = 1.0 + t as f32 / 16.0;
    }
    let lw = &mut w.layers[0];
    for i in 0..d {
        lw.wv.as_f32_mut().unwrap()[i * d + i] = 1.0;
        lw.wo.as_f32_mut().unwrap()[i * d + i] = 1.0;
    }
    let u = w.unembed.as_mut().unwrap().as_f32_mut().unwrap();
    for t in 0..d {
        u[t * d + t] = 1.0;
    }
    Model::new(cfg, w).unwrap()
}

#[test]
fn identity_like_model_predicts_golden_token() {
    let model = identity_like_model();
    let tokens = [3u32, 12, 12, 6];
    // normed one-hots are sqrt(8) whatever their scale, so the last row is
    // 1.375 e6 + sqrt(8) / 4 (e3 + 2 e4 + e6): column 6 wins with ~2.08
    const GOLDEN: usize = 6;
    let oracle = oracle_logits(&model, &tokens);
    let last = oracle.last().unwrap();
    let oracle_argmax = (0..last.len()).max_by(|&a, &b| last[a].total_cmp(&last[b])).unwrap();
    let out = model.forward(&TokenSequence::new(tokens.to_vec()), &CaptureSet::none()).unwrap();
    let l = out.logits.last();
    let argmax = (0..l.len()).max_by(|&a, &b| l[a].total_cmp(&l[b])).unwrap();
    assert_eq!(oracle_argmax, GOLDEN);
    assert_eq!(argmax, GOLDEN);
}

#[test]
fn empty_capture_gives_empty_cache() {
    let model = random_model(0).unwrap();
    let out = model.forward(&TokenSequence::new(vec![1, 2, 3]), &CaptureSet::none()).unwrap();
    assert!(out.cache.is_empty());
    assert_eq!(out.logits.matrix().rows(), 3);
}

#[test]
fn capture_by_site_only_keeps_that_site() {
    let model = random_model(0).unwrap();
    let out = model
        .forward(&TokenSequence::new(vec![1, 2, 3]), &CaptureSet::sites(&[Site::MlpOut]))
        .unwrap();
    assert_eq!(out.cache.len(), model.n_layers());
    assert!(out.cache.keys().all(|k| k.site == Site::MlpOut));
}

#[test]
fn too_long_and_out_of_range_inputs_are_rejected() {
    let mut cfg = ModelConfig::new(1, 2, 2, 16, 8, 32);
    cfg.max_seq_len = 4;
    let model = random_model_with(cfg, 0, 0.1).unwrap();
    let err = model.forward(&TokenSequence::new(vec![1; 5]), &CaptureSet::none()).unwrap_err();
    assert!(matches!(err, Error::Length { .. }), "{err}");
    let err = model.forward(&TokenSequence::new(vec![40]), &CaptureSet::none()).unwrap_err();
    assert!(matches!(err, Error::TokenOutOfRange { .. }), "{err}");
}

#[test]
fn unembed_is_affine() {
    let model = random_model(11).unwrap();
    let d = model.config().d_model;
    let zero = model.unembed(&vec![0.0; d]).unwrap();
    assert_eq!(zero, model.weights().unembed_bias);

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let v: Vec<f32> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let w: Vec<f32> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let vw: Vec<f32> = v.iter().zip(&w).map(|(a, b)| a + b).collect();
    let (uv, uw, uvw) = (model.unembed(&v).unwrap(), model.unembed(&w).unwrap(), model.unembed(&vw).unwrap());
    for i in 0..uv.len() {
        let want = uv[i] + uw[i] - zero[i];
        assert!((uvw[i] - want).abs() < 1e-4);
    }
    assert!(matches!(model.unembed(&[0.0; 3]), Err(Error::Shape(_))));
}

#[test]
fn final_position_logits_match_unembedded_residual() {
    let model = random_model(2).unwrap();
    let tokens = TokenSequence::new(vec![4, 8, 15, 16, 23, 42]);
    let last_layer = model.n_layers() - 1;
    let out = model
        .forward(&tokens, &CaptureSet::keys([CacheKey::resid(last_layer)]))
        .unwrap();
    let resid = out.cache.get(&CacheKey::resid(last_layer)).unwrap();
    let via = model.unembed(&model.final_norm(resid.row(5)).unwrap()).unwrap();
    for (a, b) in via.iter().zip(out.logits.last()) {
        assert!((a - b).abs() < 1e-4);
    }
}

#[test]
fn forward_is_deterministic_across_thread_counts() {
    let model = random_model(9).unwrap();
    let tokens = TokenSequence::new((0..40).map(|i| (i * 37 % 512) as u32).collect());
    let a = model.forward(&tokens, &CaptureSet::all()).unwrap();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let b = pool.install(|| model.forward(&tokens, &CaptureSet::all()).unwrap());
    assert_eq!(a.logits.matrix().as_slice(), b.logits.matrix().as_slice());
    for (k, v) in a.cache.iter() {
        assert_eq!(v.as_slice(), b.cache.get(k).unwrap().as_slice(), "{k}");
    }
}

#[test]
fn checkpoint_round_trip_and_shape_errors() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ModelConfig::new(2, 4, 4, 64, 32, 512);
    cfg.rope_theta = 10_000.0;
    let model = random_model_with(cfg.clone(), 4, 0.1).unwrap();
    model.save_dir(dir.path()).unwrap();
    let back = Model::load_dir(dir.path(), StoragePrecision::F32).unwrap();
    assert_eq!(back.n_layers(), 2);
    let tokens = TokenSequence::new(vec![1, 2, 3]);
    let a = model.forward(&tokens, &CaptureSet::none()).unwrap();
    let b = back.forward(&tokens, &CaptureSet::none()).unwrap();
    assert_eq!(a.logits.matrix().as_slice(), b.logits.matrix().as_slice());

    let mut w = model.weights().clone();
    w.unembed = Some(WeightMatrix::zeros(512, 32));
    let err = Model::new(cfg, w).unwrap_err().to_string();
    assert!(err.contains("W_U"), "{err}");
}
