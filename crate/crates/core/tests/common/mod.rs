//! Oracles shared by the integration and acceptance tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stta_core::cndrm::MemoryConfig;
use stta_core::{ChannelStats, Memory, MemorySample, SampleStats, Tensor};

pub fn candidate(label: usize, conf: f64, mu: Vec<f64>, sigma: Vec<f64>) -> MemorySample {
    MemorySample {
        input: Tensor::filled(&[mu.len(), 1], label as f64),
        pseudo_label: label,
        confidence: conf,
        stats: SampleStats::new(mu, sigma).unwrap(),
        wdist: 0.0,
        entropy: 1.0 - conf,
        arrival_index: 0,
        eval_label: Some(label),
    }
}

pub type Item = (u64, usize, f64, Vec<f64>, Vec<f64>, f64);

/// Reference memory: recomputes everything from scratch with plain scans.
pub struct Reference {
    pub cap: usize,
    pub tau_conf: f64,
    pub tau_delta: f64,
    pub beta: f64,
    pub items: Vec<Item>,
    pub centroid: Option<(Vec<f64>, Vec<f64>)>,
    pub arrivals: u64,
}

impl Reference {
    pub fn new(cap: usize, tau_conf: f64, tau_delta: f64, beta: f64) -> Self {
        Self { cap, tau_conf, tau_delta, beta, items: Vec::new(), centroid: None, arrivals: 0 }
    }

    fn dist(&self, mu: &[f64], sigma: &[f64]) -> f64 {
        let Some((cm, cv)) = &self.centroid else { return 0.0 };
        let mut t = 0.0;
        for i in 0..mu.len() {
            t += (mu[i] - cm[i]).powi(2) + (sigma[i] - cv[i].sqrt()).powi(2);
        }
        t.sqrt()
    }

    pub fn insert(&mut self, label: usize, conf: f64, mu: Vec<f64>, sigma: Vec<f64>) {
        let id = self.arrivals;
        self.arrivals += 1;
        if conf <= self.tau_conf {
            return;
        }
        let d = self.dist(&mu, &sigma);
        self.items.push((id, label, conf, mu, sigma, d));
        if self.items.len() <= self.cap {
            return;
        }
        // Largest class; ties by highest member distance, then lowest id.
        let mut best: Option<(usize, usize, f64)> = None;
        for class in 0..16 {
            let members: Vec<_> = self.items.iter().filter(|it| it.1 == class).collect();
            if members.is_empty() {
                continue;
            }
            let top = members.iter().map(|it| it.5).fold(f64::NEG_INFINITY, f64::max);
            let n = members.len();
            if best.is_none_or(|(_, bn, bt)| n > bn || (n == bn && top > bt)) {
                best = Some((class, n, top));
            }
        }
        let class = best.unwrap().0;
        let mut victim = None;
        for (i, it) in self.items.iter().enumerate() {
            if it.1 == class && victim.is_none_or(|v: usize| it.5 > self.items[v].5) {
                victim = Some(i);
            }
        }
        self.items.remove(victim.unwrap());
    }

    pub fn update(&mut self, mean: &[f64], var: &[f64]) {
        let shift = match &self.centroid {
            None => {
                self.centroid = Some((mean.to_vec(), var.to_vec()));
                f64::INFINITY
            }
            Some((cm, cv)) => {
                let b = self.beta;
                let nm: Vec<f64> = cm.iter().zip(mean).map(|(m, t)| (1.0 - b) * m + b * t).collect();
                let nv: Vec<f64> = cv.iter().zip(var).map(|(v, t)| (1.0 - b) * v + b * t).collect();
                let mut s = 0.0;
                for i in 0..nm.len() {
                    s += (nm[i] - cm[i]).powi(2) + (nv[i].sqrt() - cv[i].sqrt()).powi(2);
                }
                self.centroid = Some((nm, nv));
                s.sqrt()
            }
        };
        if shift > self.tau_delta {
            for i in 0..self.items.len() {
                let d = self.dist(&self.items[i].3.clone(), &self.items[i].4.clone());
                self.items[i].5 = d;
            }
        }
    }

    pub fn dump(&self) -> Vec<(u64, usize, f64, f64)> {
        self.items.iter().map(|it| (it.0, it.1, it.2, it.5)).collect()
    }
}

/// Drives the real memory and the reference through the same random
/// drifting stream and compares full contents after every batch.
pub fn replay(seed: u64, capacity: usize, classes: usize, batches: usize, batch: usize) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = MemoryConfig { capacity, ..MemoryConfig::default() };
    let mut mem = Memory::new(cfg.clone()).unwrap();
    let mut oracle = Reference::new(capacity, cfg.tau_conf, cfg.tau_delta, cfg.centroid_momentum);
    let c = 3;
    for t in 0..batches {
        // Drifting domain so both rescoring branches fire.
        let drift = if t % 4 == 0 { 0.5 } else { 0.01 } * t as f64;
        let mut cands = Vec::new();
        for _ in 0..batch {
            let label = rng.random_range(0..classes);
            let conf = rng.random_range(0.2..1.0);
            let mu: Vec<f64> = (0..c).map(|_| drift + rng.random_range(-1.0..1.0)).collect();
            let sigma: Vec<f64> = (0..c).map(|_| rng.random_range(0.1..2.0)).collect();
            cands.push((label, conf, mu, sigma));
        }
        for (label, conf, mu, sigma) in &cands {
            let mut s = candidate(*label, *conf, mu.clone(), sigma.clone());
            s.wdist = mem.score(&s.stats).unwrap();
            mem.insert(s);
            oracle.insert(*label, *conf, mu.clone(), sigma.clone());
        }
        let mean: Vec<f64> = (0..c).map(|_| drift + rng.random_range(-0.2..0.2)).collect();
        let var: Vec<f64> = (0..c).map(|_| rng.random_range(0.5..1.5)).collect();
        let shift = mem.update_centroid(&ChannelStats::new(mean.clone(), var.clone()).unwrap()).unwrap();
        mem.maybe_rescore(shift).unwrap();
        oracle.update(&mean, &var);

        let got: Vec<_> =
            mem.samples().iter().map(|s| (s.arrival_index, s.pseudo_label, s.confidence, s.wdist)).collect();
        let want = oracle.dump();
        if got.len() != want.len() {
            return Err(format!("seed {seed} batch {t}: {} vs {} samples", got.len(), want.len()));
        }
        for (g, w) in got.iter().zip(&want) {
            if (g.0, g.1, g.2) != (w.0, w.1, w.2) || (g.3 - w.3).abs() >= 1e-12 {
                return Err(format!("seed {seed} batch {t}: {g:?} vs {w:?}"));
            }
        }
    }
    Ok(())
}

/// Runs the engine in Tent-equivalent mode next to a bare entropy-descent
/// loop and checks the affine parameters agree bit-for-bit after every
/// batch. Returns the number of batches compared.
pub fn tent_equivalence(base: &stta_core::Model, spec: &stta_core::StreamSpec, lr: f64) -> Result<usize, String> {
    use stta_core::datagen::make_stream;
    use stta_core::{Engine, EngineConfig, Method, NormSource};

    let cfg = EngineConfig { lr, ..Method::TentEquivalent.config(1.0, 0) };
    let mut engine = Engine::new(base.clone(), cfg, spec.batch_size).map_err(|e| e.to_string())?;
    let mut tent = base.clone();
    let mut n = 0;
    for batch in make_stream(spec).map_err(|e| e.to_string())? {
        let rec = engine.process_batch(&batch.inputs, Some(&batch.labels), 0).map_err(|e| e.to_string())?;
        // Reference: predict, then one step on the same batch.
        let preds = tent.predict(&batch.inputs, NormSource::Batch).map_err(|e| e.to_string())?;
        let correct = preds.iter().zip(&batch.labels).filter(|(p, y)| p == y).count();
        let (_, grads, _) = tent.entropy_gradients(&batch.inputs).map_err(|e| e.to_string())?;
        let mut g = grads.iter().flat_map(|g| g.gamma.iter().chain(&g.beta));
        for layer in tent.norm_layers_mut() {
            for p in layer.gamma.iter_mut().chain(layer.beta.iter_mut()) {
                *p -= lr * g.next().expect("one gradient per parameter");
            }
        }
        if rec.correct != Some(correct) || !rec.adapted {
            return Err(format!("batch {}: record {:?}", batch.index, rec.correct));
        }
        let (a, b) = (engine.model().affine_params(), tent.affine_params());
        if !a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()) {
            return Err(format!("parameters diverge at batch {}", batch.index));
        }
        n += 1;
    }
    Ok(n)
}
