use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use partseg::decoder::{FilmLayer, MaskHead, ScaleEmbedding};
use partseg::encoder::contrastive_loss;
use partseg::nn::{
    grad_check, grad_check_input, Attention, FeedForward, GradCheckConfig, GradCheckReport, Gradients, Init, LayerNorm,
    Linear, ParameterStore, Tensor,
};
use partseg::training::{bce_dyn, bce_weight, dice_term, seg_loss, LossValue, SegLossConfig};

use crate::util::{ensure, probe, random_tensor, randomize};
use crate::Check;

const TOL: f64 = 1e-3;
const MAX_POINTS: usize = 32;

fn layer_cfg() -> GradCheckConfig {
    GradCheckConfig { tol: TOL, samples: 32, ..Default::default() }
}

fn linear_check() -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParameterStore::new();
    let x = store.add("x", random_tensor(&[MAX_POINTS, 6], 1.0, 2)).unwrap();
    let lin = Linear::new(&mut store, "lin", 6, 5, Init::Default, &mut rng).unwrap();
    randomize(&mut store, 0.8, 3);
    let r = random_tensor(&[MAX_POINTS, 5], 1.0, 4);
    let mut grads = Gradients::zeros_like(&store);
    let dx = lin.backward(&store, store.get(x), &r, &mut grads);
    grads.accumulate(x, &dx);
    grad_check(&mut store, &grads, |s| probe(&lin.forward(s, s.get(x)).unwrap(), &r), &layer_cfg()).unwrap()
}

fn layer_norm_check() -> GradCheckReport {
    let mut store = ParameterStore::new();
    let x = store.add("x", random_tensor(&[16, 8], 1.5, 5)).unwrap();
    let ln = LayerNorm::new(&mut store, "ln", 8).unwrap();
    randomize(&mut store, 0.5, 6);
    let r = random_tensor(&[16, 8], 1.0, 7);
    let mut grads = Gradients::zeros_like(&store);
    let (_, cache) = ln.forward(&store, store.get(x)).unwrap();
    let dx = ln.backward(&store, &cache, &r, &mut grads);
    grads.accumulate(x, &dx);
    grad_check(&mut store, &grads, |s| probe(&ln.forward(s, s.get(x)).unwrap().0, &r), &layer_cfg()).unwrap()
}

fn mha_check() -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut store = ParameterStore::new();
    let q = store.add("q_in", random_tensor(&[8, 16], 1.0, 9)).unwrap();
    let kv = store.add("kv_in", random_tensor(&[12, 16], 1.0, 10)).unwrap();
    let attn = Attention::new(&mut store, "attn", 16, 4, &mut rng).unwrap();
    randomize(&mut store, 0.5, 11);
    let r = random_tensor(&[8, 16], 1.0, 12);
    let mut grads = Gradients::zeros_like(&store);
    let (_, cache) = attn.forward(&store, store.get(q), store.get(kv)).unwrap();
    let (dq, dkv) = attn.backward(&store, &cache, &r, &mut grads);
    grads.accumulate(q, &dq);
    grads.accumulate(kv, &dkv);
    grad_check(&mut store, &grads, |s| probe(&attn.forward(s, s.get(q), s.get(kv)).unwrap().0, &r), &layer_cfg()).unwrap()
}

fn ffn_check() -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut store = ParameterStore::new();
    let x = store.add("x", random_tensor(&[MAX_POINTS, 8], 1.0, 14)).unwrap();
    let ffn = FeedForward::new(&mut store, "ffn", 8, 16, true, &mut rng).unwrap();
    randomize(&mut store, 0.5, 15);
    let r = random_tensor(&[MAX_POINTS, 8], 1.0, 16);
    let mut grads = Gradients::zeros_like(&store);
    let (_, cache) = ffn.forward(&store, store.get(x)).unwrap();
    let dx = ffn.backward(&store, &cache, &r, &mut grads);
    grads.accumulate(x, &dx);
    grad_check(&mut store, &grads, |s| probe(&ffn.forward(s, s.get(x)).unwrap().0, &r), &layer_cfg()).unwrap()
}

fn film_check() -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut store = ParameterStore::new();
    let x = store.add("x", random_tensor(&[20, 6], 1.0, 18)).unwrap();
    let e = store.add("e", random_tensor(&[1, 8], 1.0, 19)).unwrap();
    let film = FilmLayer::new(&mut store, "film", 8, 6, &mut rng).unwrap();
    randomize(&mut store, 0.5, 20);
    let r = random_tensor(&[20, 6], 1.0, 21);
    let mut grads = Gradients::zeros_like(&store);
    let (_, cache) = film.forward(&store, store.get(x), store.get(e)).unwrap();
    let (dx, de) = film.backward(&store, &cache, &r, &mut grads);
    grads.accumulate(x, &dx);
    grads.accumulate(e, &de);
    grad_check(&mut store, &grads, |s| probe(&film.forward(s, s.get(x), s.get(e)).unwrap().0, &r), &layer_cfg()).unwrap()
}

fn scale_embed_checks() -> Vec<(String, GradCheckReport)> {
    let mut store = ParameterStore::new();
    let emb = ScaleEmbedding::new(&mut store, "scale", 8).unwrap();
    store.get_mut(emb.phi).data_mut().copy_from_slice(random_tensor(&[8], 1.0, 22).data());
    store.get_mut(emb.omega).data_mut().copy_from_slice(random_tensor(&[8], 6.0, 23).data());
    let r = random_tensor(&[1, 16], 1.0, 24);
    [0.0f32, 0.35, 0.8, 1.0]
        .into_iter()
        .map(|s| {
            let mut grads = Gradients::zeros_like(&store);
            emb.backward(&store, s, &r, &mut grads);
            let rep = grad_check(&mut store, &grads, |st| probe(&emb.embed(st, s), &r), &layer_cfg()).unwrap();
            (format!("scale_embed(s={s})"), rep)
        })
        .collect()
}

fn mask_head_check() -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(25);
    let mut store = ParameterStore::new();
    let h = store.add("h", random_tensor(&[MAX_POINTS, 12], 1.0, 26)).unwrap();
    let head = MaskHead::new(&mut store, "head", 12, &mut rng).unwrap();
    randomize(&mut store, 0.5, 27);
    let r: Vec<f32> = random_tensor(&[MAX_POINTS], 1.0, 28).into_data();
    let mut grads = Gradients::zeros_like(&store);
    let (_, cache) = head.forward(&store, store.get(h)).unwrap();
    let dh = head.backward(&store, &cache, &r, &mut grads);
    grads.accumulate(h, &dh);
    let f = |s: &ParameterStore| {
        let (p, _) = head.forward(s, s.get(h)).unwrap();
        p.iter().zip(&r).map(|(a, b)| *a as f64 * *b as f64).sum()
    };
    grad_check(&mut store, &grads, f, &layer_cfg()).unwrap()
}

fn contrastive_check() -> GradCheckReport {
    let f = random_tensor(&[MAX_POINTS, 8], 1.0, 29);
    let labels: Vec<u32> = (0..MAX_POINTS as u32).map(|i| i % 4).collect();
    let out = contrastive_loss(&f, &labels, 0.07).unwrap();
    let cfg = GradCheckConfig { samples: MAX_POINTS * 8, ..layer_cfg() };
    grad_check_input("contrastive_loss", &f, &out.grad, |x| contrastive_loss(x, &labels, 0.07).unwrap().loss, &cfg).unwrap()
}

fn loss_checks() -> Vec<(String, GradCheckReport)> {
    let n = MAX_POINTS;
    let mut out = Vec::new();
    for positives in [1usize, 8, 16, 31] {
        let mask: Vec<bool> = (0..n).map(|i| (i * 7) % n < positives).collect();
        let pred = random_tensor(&[n], 0.45, 30 + positives as u64).into_data().into_iter().map(|v| 0.5 + v).collect::<Vec<_>>();
        let x = Tensor::new(vec![n], pred.clone()).unwrap();
        // Loss gradients are O(1/N); a floor of 1e-2 keeps the relative error meaningful.
        let cfg = GradCheckConfig { samples: n, floor: 1e-2, ..layer_cfg() };
        let terms: [(&str, Box<dyn Fn(&[f32]) -> LossValue>); 3] = [
            ("bce_dyn", Box::new(|p: &[f32]| bce_dyn(p, &mask, 1e-6).unwrap())),
            ("dice_term", Box::new(|p: &[f32]| dice_term(p, &mask, 1e-6).unwrap())),
            (
                "seg_loss",
                Box::new(|p: &[f32]| {
                    let s = seg_loss(p, &mask, &SegLossConfig::default()).unwrap();
                    LossValue { loss: s.loss, grad: s.grad }
                }),
            ),
        ];
        for (name, f) in terms {
            let g = Tensor::new(vec![n], f(&pred).grad).unwrap();
            let rep = grad_check_input(name, &x, &g, |t| f(t.data()).loss, &cfg).unwrap();
            out.push((format!("{name}(pi={positives}/{n})"), rep));
        }
    }
    out
}

pub fn gradient_suite() -> Check {
    let t = Instant::now();
    let mut reports: Vec<(String, GradCheckReport)> = vec![
        ("linear".into(), linear_check()),
        ("layer_norm".into(), layer_norm_check()),
        ("mha".into(), mha_check()),
        ("ffn".into(), ffn_check()),
        ("film_modulate".into(), film_check()),
        ("mask_head".into(), mask_head_check()),
        ("contrastive_loss".into(), contrastive_check()),
    ];
    reports.extend(scale_embed_checks());
    reports.extend(loss_checks());
    let secs = t.elapsed().as_secs_f64();
    let worst = reports.iter().map(|(_, r)| r.max_rel_err()).fold(0.0, f64::max);
    let failing: Vec<String> =
        reports.iter().filter(|(_, r)| r.max_rel_err() >= TOL).map(|(n, r)| format!("{n}: {:.3e}\n{r}", r.max_rel_err())).collect();
    ensure(failing.is_empty(), || failing.join("\n"))?;
    ensure(secs < 120.0, || format!("suite took {secs:.1}s"))?;
    let per_op: Vec<String> = reports.iter().map(|(n, r)| format!("{n} {:.1e}", r.max_rel_err())).collect();
    Ok(format!("{} checks, max rel err {worst:.2e} < 1e-3, {secs:.1}s < 120s ({})", reports.len(), per_op.join(", ")))
}

fn random_orthogonal(d: usize, seed: u64) -> Vec<Vec<f64>> {
    let m = random_tensor(&[d, d], 1.0, seed);
    let mut q: Vec<Vec<f64>> = Vec::new();
    for i in 0..d {
        let mut v: Vec<f64> = m.row(i).iter().map(|&x| x as f64).collect();
        for u in &q {
            let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= dot * b);
        }
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        q.push(v.into_iter().map(|a| a / n).collect());
    }
    q
}

pub fn loss_identities() -> Check {
    let eps = 1e-6;
    let n = 40;
    let m: Vec<bool> = (0..n).map(|i| i % 3 == 0).collect();
    let as_pred = |m: &[bool]| m.iter().map(|&b| b as u8 as f32).collect::<Vec<_>>();
    let same = dice_term(&as_pred(&m), &m, eps).unwrap().loss;
    ensure(same.abs() <= eps, || format!("dice(m, m) = {same:e}"))?;
    let flipped: Vec<bool> = m.iter().map(|b| !b).collect();
    let disjoint = dice_term(&as_pred(&flipped), &m, eps).unwrap().loss;
    ensure(disjoint == 1.0, || format!("dice(disjoint) = {disjoint}"))?;

    let b5 = bce_weight(0.5, eps);
    let b1 = bce_weight(0.1, eps);
    ensure((b5 - 1.0).abs() < 1e-5, || format!("beta(0.5) = {b5}"))?;
    ensure((b1 - 9.0).abs() < 1e-4, || format!("beta(0.1) = {b1}"))?;
    // The weight used inside bce_dyn follows the mask ratio.
    let m10: Vec<bool> = (0..n).map(|i| i % 10 == 0).collect();
    let p = vec![0.3f32; n];
    let got = bce_dyn(&p, &m10, eps).unwrap().loss;
    let want = -(b1 * 4.0 * (0.3f32 as f64).ln() + 36.0 * (1.0 - 0.3f32 as f64).ln()) / n as f64;
    ensure((got - want).abs() < 1e-9, || format!("bce_dyn {got} vs {want}"))?;

    let f = Tensor::matrix(3, 4, [0.3f32, -1.0, 0.5, 2.0].repeat(3)).unwrap();
    let ln2 = contrastive_loss(&f, &[0, 0, 1], 0.07).unwrap().loss;
    ensure((ln2 - std::f64::consts::LN_2).abs() < 1e-6, || format!("(a,a,b) loss {ln2}"))?;

    let labels: Vec<u32> = (0..24).map(|i| i % 4).collect();
    let mut worst_scale = 0.0f64;
    let mut worst_rot = 0.0f64;
    for seed in 0..20u64 {
        let f = random_tensor(&[24, 8], 1.0, 100 + seed);
        let base = contrastive_loss(&f, &labels, 0.07).unwrap().loss;
        for c in [0.01f32, 0.5, 3.0, 100.0] {
            let mut g = f.clone();
            g.scale(c);
            worst_scale = worst_scale.max((contrastive_loss(&g, &labels, 0.07).unwrap().loss - base).abs());
        }
        let q = random_orthogonal(8, 200 + seed);
        let mut g = Tensor::zeros(&[24, 8]);
        for i in 0..24 {
            for k in 0..8 {
                g.row_mut(i)[k] = (0..8).map(|j| q[k][j] * f.row(i)[j] as f64).sum::<f64>() as f32;
            }
        }
        worst_rot = worst_rot.max((contrastive_loss(&g, &labels, 0.07).unwrap().loss - base).abs());
    }
    ensure(worst_scale < 1e-5, || format!("scale invariance off by {worst_scale:e}"))?;
    ensure(worst_rot < 1e-5, || format!("rotation invariance off by {worst_rot:e}"))?;
    Ok(format!(
        "dice(m,m)={same:.1e}, dice(disjoint)=1, beta(0.5)={b5:.6}, beta(0.1)={b1:.5}, (a,a,b)={ln2:.9}, \
         |scale dev| {worst_scale:.1e}, |rotation dev| {worst_rot:.1e}"
    ))
}
