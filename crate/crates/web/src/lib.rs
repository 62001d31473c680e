//! Browser bindings for three small interactive views: teacher
//! pseudo-documents, the KL warm-up curve, and topic alignment between two
//! random models. Every export returns a JSON string.

use bat_core::align::{competitive_link, jsd_matrix};
use bat_core::distill::{soften_and_clip, KdConfig};
use bat_core::numerics::SeededRng;
use bat_core::trainer::kl_weight;
use serde::Serialize;
use wasm_bindgen::prelude::*;

fn to_json(value: &impl Serialize) -> String {
    serde_json::to_string(value).expect("serializable")
}

fn error_json(msg: impl std::fmt::Display) -> String {
    to_json(&serde_json::json!({ "error": msg.to_string() }))
}

#[derive(Serialize)]
struct PseudoView {
    probs: Vec<f64>,
    weights: Vec<f64>,
    support: usize,
    keep: usize,
}

/// Softened, optionally clipped teacher distribution for logits `z`.
#[wasm_bindgen]
pub fn pseudo_document(z: &[f64], doc_len: u32, temperature: f64, clip: f64) -> String {
    let cfg = KdConfig {
        lambda: 1.0,
        temperature,
        clip,
    };
    if let Err(e) = cfg.validate() {
        return error_json(e);
    }
    match soften_and_clip(z, doc_len.max(1) as u64, &cfg) {
        Ok(p) => {
            let n = doc_len.max(1) as f64;
            to_json(&PseudoView {
                probs: p.weights.iter().map(|w| w / n).collect(),
                keep: cfg.keep_count(doc_len.max(1) as u64, z.len()),
                support: p.support,
                weights: p.weights,
            })
        }
        Err(e) => error_json(e),
    }
}

/// KL weight at every step of a run with `total_steps` steps.
#[wasm_bindgen]
pub fn kl_curve(total_steps: u32, anneal: f64) -> String {
    let total = total_steps.max(1) as usize;
    let curve: Result<Vec<f64>, _> = (0..total).map(|s| kl_weight(s, total, anneal)).collect();
    match curve {
        Ok(c) => to_json(&c),
        Err(e) => error_json(e),
    }
}

#[derive(Serialize)]
struct AlignView {
    jsd: Vec<Vec<f64>>,
    links: Vec<(usize, usize, f64)>,
    greedy_total: f64,
}

/// Peaked random distribution: normalized `u^sharpness` for uniform `u`.
fn random_topic(vocab: usize, sharpness: f64, rng: &mut SeededRng) -> Vec<f64> {
    let mut x: Vec<f64> = (0..vocab).map(|_| rng.uniform().max(1e-12).powf(sharpness)).collect();
    let s: f64 = x.iter().sum();
    x.iter_mut().for_each(|v| *v /= s);
    x
}

/// Aligns two random models whose topics share a hidden pairing: model B's
/// topics are noisy copies of model A's, mixed with uniform noise by `noise`.
#[wasm_bindgen]
pub fn align_random(topics_a: u32, topics_b: u32, vocab: u32, noise: f64, seed: u64) -> String {
    let (ka, kb, v) = (topics_a.clamp(1, 40) as usize, topics_b.clamp(1, 40) as usize, vocab.clamp(2, 2000) as usize);
    let noise = noise.clamp(0.0, 1.0);
    let mut rng = SeededRng::new(seed);
    let a: Vec<Vec<f64>> = (0..ka).map(|_| random_topic(v, 8.0, &mut rng)).collect();
    let mut order: Vec<usize> = (0..ka).collect();
    rng.shuffle(&mut order);
    let b: Vec<Vec<f64>> = (0..kb)
        .map(|j| {
            let fresh = random_topic(v, 8.0, &mut rng);
            match order.get(j) {
                Some(&src) => a[src].iter().zip(&fresh).map(|(p, q)| (1.0 - noise) * p + noise * q).collect(),
                None => fresh,
            }
        })
        .collect();
    let m = match jsd_matrix(&a, &b) {
        Ok(m) => m,
        Err(e) => return error_json(e),
    };
    let links = match competitive_link(&m) {
        Ok(l) => l,
        Err(e) => return error_json(e),
    };
    to_json(&AlignView {
        jsd: (0..ka).map(|i| m.row(i).to_vec()).collect(),
        greedy_total: links.iter().map(|l| l.jsd).sum(),
        links: links.iter().map(|l| (l.a, l.b, l.jsd)).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::Value;

    fn parse(s: &str) -> Value {
        serde_json::from_str(s).unwrap()
    }

    #[test]
    fn pseudo_document_matches_clipping_example() {
        let v = parse(&pseudo_document(&[2.0, 1.0, 0.0, -1.0, -2.0], 2, 1.0, 1.0));
        let w: Vec<f64> = v["weights"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect();
        assert_eq!(v["support"], 2);
        assert!((w[0] - 1.4621).abs() < 1e-4 && (w[1] - 0.5379).abs() < 1e-4);
        assert!(w[2..].iter().all(|&x| x == 0.0));
        assert!(parse(&pseudo_document(&[1.0], 3, 0.0, 0.0)).get("error").is_some());
    }

    #[test]
    fn kl_curve_ramps() {
        let c: Vec<f64> = serde_json::from_str(&kl_curve(8, 0.5)).unwrap();
        assert_eq!(c, vec![0.0, 0.25, 0.5, 0.75, 1.0, 1.0, 1.0, 1.0]);
        assert!(parse(&kl_curve(8, 0.0)).get("error").is_some());
    }

    #[test]
    fn noiseless_alignment_recovers_copies() {
        let v = parse(&align_random(6, 6, 50, 0.0, 3));
        let links = v["links"].as_array().unwrap();
        assert_eq!(links.len(), 6);
        assert!(links.iter().all(|l| l[2].as_f64().unwrap() < 1e-12));
        let noisy = parse(&align_random(6, 4, 50, 0.5, 3));
        assert_eq!(noisy["links"].as_array().unwrap().len(), 4);
        assert_eq!(noisy["jsd"].as_array().unwrap().len(), 6);
    }
}
