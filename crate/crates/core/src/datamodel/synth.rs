//! Desk-scale synthetic composed-retrieval data.
//!
//! Every image is a tuple of attribute values, one per slot. Attribute
//! vectors share a per-slot direction, so `a[s][v] = (u_s + e_sv) / sqrt 2`
//! with all `u`, `e` and the cue markers orthonormal. Patches depict one
//! slot's attribute each (plus optional clutter patches carrying a random
//! attribute and a clutter marker); the raw patch width `d_raw` is reached
//! through a fixed random isometry. A modification text names the new value
//! of one slot (change-to cue), the value it replaces (change-from cue) and a
//! few unchanged attributes (keep cues), each tagged by its marker direction.
//! The target is the gallery image whose tuple equals the reference with that
//! slot swapped; its subset holds six images one attribute away from it.

use std::collections::{HashMap, HashSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{FeatureStore, Role, TokenFeatures, Triplet, SUBSET_SIZE};
use crate::error::{Result, SsnError};
use crate::numerics::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub seed: u64,
    /// Number of gallery images.
    pub n_items: usize,
    pub d: usize,
    pub d_raw: usize,
    pub n_triplets: usize,
    pub slots: usize,
    pub values_per_slot: usize,
    pub patches_per_slot: usize,
    pub clutter_patches: usize,
    /// Unchanged attributes mentioned by each text.
    pub keep_cues: usize,
    /// Norm of the isotropic noise added to every token and global vector.
    pub noise: f32,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 7,
            n_items: 600,
            d: 32,
            d_raw: 48,
            n_triplets: 576,
            slots: 4,
            values_per_slot: 5,
            patches_per_slot: 2,
            clutter_patches: 1,
            keep_cues: 1,
            noise: 0.1,
        }
    }
}

impl SynthConfig {
    pub fn patches(&self) -> usize {
        self.slots * self.patches_per_slot + self.clutter_patches
    }

    pub fn text_tokens(&self) -> usize {
        2 + self.keep_cues
    }

    fn validate(&self) -> Result<()> {
        let basis = self.slots + self.slots * self.values_per_slot + 4;
        let err = |m: String| Err(SsnError::Config(m));
        if self.slots == 0 || self.values_per_slot < 2 {
            return err("need at least one slot with two values".into());
        }
        if basis > self.d {
            return err(format!("{basis} orthonormal directions do not fit in d={}", self.d));
        }
        if self.d_raw < self.d {
            return err(format!("d_raw={} must be at least d={}", self.d_raw, self.d));
        }
        let combos = (self.values_per_slot as f64).powi(self.slots as i32);
        if self.n_items as f64 > combos {
            return err(format!("{} items exceed {combos} distinct attribute tuples", self.n_items));
        }
        if self.keep_cues + 1 > self.slots {
            return err(format!("{} keep cues need more than {} slots", self.keep_cues, self.slots));
        }
        if self.patches() == 0 {
            return err("images need at least one patch".into());
        }
        if !(self.noise >= 0.0) {
            return err("noise must be non-negative".into());
        }
        Ok(())
    }
}

struct Vocabulary {
    attr: Vec<Vec<Vec<f64>>>,
    to_marker: Vec<f64>,
    from_marker: Vec<f64>,
    keep_marker: Vec<f64>,
    clutter_marker: Vec<f64>,
    /// `d x d_raw`, orthonormal rows.
    lift: Vec<Vec<f64>>,
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Gram-Schmidt over fresh Gaussian draws.
fn orthonormal(rng: &mut ChaCha8Rng, count: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(count);
    while basis.len() < count {
        let mut v = gaussian(rng, dim);
        for b in &basis {
            let p = dot(&v, b);
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
        }
        let n = dot(&v, &v).sqrt();
        if n > 1e-6 {
            basis.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    basis
}

impl Vocabulary {
    fn new(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Self {
        let (s, v) = (cfg.slots, cfg.values_per_slot);
        let mut dirs = orthonormal(rng, s + s * v + 4, cfg.d).into_iter();
        let slot_dirs: Vec<Vec<f64>> = dirs.by_ref().take(s).collect();
        let attr = slot_dirs
            .iter()
            .map(|u| {
                (0..v)
                    .map(|_| {
                        let e = dirs.next().unwrap();
                        u.iter()
                            .zip(&e)
                            .map(|(a, b)| (a + b) / std::f64::consts::SQRT_2)
                            .collect()
                    })
                    .collect()
            })
            .collect();
        let to_marker = dirs.next().unwrap();
        let from_marker = dirs.next().unwrap();
        let keep_marker = dirs.next().unwrap();
        let clutter_marker = dirs.next().unwrap();
        let lift = orthonormal(rng, cfg.d, cfg.d_raw);
        Vocabulary {
            attr,
            to_marker,
            from_marker,
            keep_marker,
            clutter_marker,
            lift,
        }
    }

    fn lift(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.lift[0].len()];
        for (xi, row) in x.iter().zip(&self.lift) {
            out.iter_mut().zip(row).for_each(|(o, r)| *o += xi * r);
        }
        out
    }
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

fn normalized(v: Vec<f64>) -> Vec<f64> {
    let n = dot(&v, &v).sqrt().max(1e-12);
    v.into_iter().map(|x| x / n).collect()
}

fn noisy(rng: &mut ChaCha8Rng, v: Vec<f64>, noise: f32) -> Vec<f64> {
    if noise == 0.0 {
        return v;
    }
    let scale = noise as f64 / (v.len() as f64).sqrt();
    v.into_iter()
        .map(|x| x + scale * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

fn to_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

/// Deterministic in `config` (including its seed).
pub fn synth_generate(config: &SynthConfig) -> Result<FeatureStore> {
    config.validate()?;
    let cfg = config;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let vocab = Vocabulary::new(cfg, &mut rng);
    let (s_n, v_n) = (cfg.slots, cfg.values_per_slot);

    let mut tuples: Vec<Vec<usize>> = (0..v_n.pow(s_n as u32))
        .map(|mut code| {
            (0..s_n)
                .map(|_| {
                    let v = code % v_n;
                    code /= v_n;
                    v
                })
                .collect()
        })
        .collect();
    tuples.shuffle(&mut rng);
    tuples.truncate(cfg.n_items);
    let by_tuple: HashMap<Vec<usize>, u64> = tuples
        .iter()
        .enumerate()
        .map(|(i, t)| (t.clone(), i as u64))
        .collect();

    let mut store = FeatureStore::new(cfg.d_raw, cfg.d);
    for (id, tuple) in tuples.iter().enumerate() {
        let mut patches = Vec::with_capacity(cfg.patches() * cfg.d_raw);
        for (s, &v) in tuple.iter().enumerate() {
            for _ in 0..cfg.patches_per_slot {
                let p = noisy(&mut rng, vocab.attr[s][v].clone(), cfg.noise);
                patches.extend(to_f32(&vocab.lift(&p)));
            }
        }
        for _ in 0..cfg.clutter_patches {
            let s = rng.random_range(0..s_n);
            let v = rng.random_range(0..v_n);
            let p = noisy(&mut rng, add(&vocab.attr[s][v], &vocab.clutter_marker), cfg.noise);
            patches.extend(to_f32(&vocab.lift(&p)));
        }
        let sum = tuple
            .iter()
            .enumerate()
            .fold(vec![0.0; cfg.d], |acc, (s, &v)| add(&acc, &vocab.attr[s][v]));
        let global = noisy(&mut rng, normalized(sum), cfg.noise);
        store.insert(TokenFeatures {
            item_id: id as u64,
            role: Role::TargetImage,
            global: to_f32(&global),
            tokens: Tensor::matrix(cfg.patches(), cfg.d_raw, patches)?,
        })?;
    }

    let mut seen = HashSet::new();
    let mut next_text_id = cfg.n_items as u64;
    let max_attempts = 1000 * cfg.n_triplets.max(1);
    let mut attempts = 0;
    while store.triplets().len() < cfg.n_triplets {
        attempts += 1;
        if attempts > max_attempts {
            return Err(SsnError::Config(format!(
                "only {} of {} triplets could be drawn",
                store.triplets().len(),
                cfg.n_triplets
            )));
        }
        let ref_id = rng.random_range(0..cfg.n_items);
        let slot = rng.random_range(0..s_n);
        let old = tuples[ref_id][slot];
        let new = (old + rng.random_range(1..v_n)) % v_n;
        let mut target = tuples[ref_id].clone();
        target[slot] = new;
        let Some(&target_id) = by_tuple.get(&target) else {
            continue;
        };
        if !seen.insert((ref_id as u64, target_id)) {
            continue;
        }
        let mut near: Vec<u64> = Vec::new();
        for s in 0..s_n {
            for v in 0..v_n {
                if v == target[s] {
                    continue;
                }
                let mut t = target.clone();
                t[s] = v;
                if let Some(&id) = by_tuple.get(&t) {
                    if id != ref_id as u64 {
                        near.push(id);
                    }
                }
            }
        }
        if near.len() < SUBSET_SIZE {
            seen.remove(&(ref_id as u64, target_id));
            continue;
        }
        near.shuffle(&mut rng);
        let subset: [u64; SUBSET_SIZE] = near[..SUBSET_SIZE].try_into().unwrap();

        let mut cues = vec![
            add(&vocab.attr[slot][new], &vocab.to_marker),
            add(&vocab.attr[slot][old], &vocab.from_marker),
        ];
        let mut others: Vec<usize> = (0..s_n).filter(|&s| s != slot).collect();
        others.shuffle(&mut rng);
        for &s in others.iter().take(cfg.keep_cues) {
            cues.push(add(&vocab.attr[s][tuples[ref_id][s]], &vocab.keep_marker));
        }
        cues.shuffle(&mut rng);
        let tokens: Vec<Vec<f64>> = cues
            .into_iter()
            .map(|c| noisy(&mut rng, c, cfg.noise))
            .collect();
        let sum = tokens.iter().fold(vec![0.0; cfg.d], |acc, t| add(&acc, t));
        let global = noisy(&mut rng, normalized(sum), cfg.noise);
        let text_id = next_text_id;
        next_text_id += 1;
        store.insert(TokenFeatures {
            item_id: text_id,
            role: Role::Text,
            global: to_f32(&global),
            tokens: Tensor::matrix(
                tokens.len(),
                cfg.d,
                tokens.iter().flat_map(|t| to_f32(t)).collect(),
            )?,
        })?;
        store.push_triplet(Triplet {
            reference_id: ref_id as u64,
            text_id,
            target_id,
            subset_ids: Some(subset),
        })?;
    }
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            n_items: 120,
            slots: 3,
            n_triplets: 40,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn deterministic_for_fixed_seed() {
        let a = synth_generate(&small()).unwrap();
        let b = synth_generate(&small()).unwrap();
        assert_eq!(super::super::encode_store(&a), super::super::encode_store(&b));
        let c = synth_generate(&SynthConfig { seed: 8, ..small() }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn shapes_and_subsets() {
        let cfg = small();
        let s = synth_generate(&cfg).unwrap();
        assert_eq!(s.gallery_ids().len(), cfg.n_items);
        assert_eq!(s.triplets().len(), cfg.n_triplets);
        for t in s.triplets() {
            let subset = t.subset_ids.unwrap();
            let uniq: HashSet<_> = subset.iter().collect();
            assert_eq!(uniq.len(), SUBSET_SIZE);
            assert!(!subset.contains(&t.reference_id));
            assert_eq!(s.item(t.reference_id).unwrap().token_count(), cfg.patches());
            assert_eq!(s.item(t.text_id).unwrap().token_count(), cfg.text_tokens());
        }
    }

    #[test]
    fn noiseless_target_is_reference_with_swapped_slot() {
        let cfg = SynthConfig {
            noise: 0.0,
            clutter_patches: 0,
            ..small()
        };
        let s = synth_generate(&cfg).unwrap();
        for t in s.triplets() {
            let r = &s.item(t.reference_id).unwrap().tokens;
            let g = &s.item(t.target_id).unwrap().tokens;
            let changed: Vec<usize> = (0..cfg.slots)
                .filter(|&slot| r.row(slot * cfg.patches_per_slot) != g.row(slot * cfg.patches_per_slot))
                .collect();
            assert_eq!(changed.len(), 1);
            for slot in 0..cfg.slots {
                for p in 0..cfg.patches_per_slot {
                    let row = slot * cfg.patches_per_slot + p;
                    if slot == changed[0] {
                        assert_ne!(r.row(row), g.row(row));
                    } else {
                        assert_eq!(r.row(row), g.row(row));
                    }
                }
            }
        }
    }

    #[test]
    fn infeasible_configs() {
        let too_many = SynthConfig {
            n_items: 700,
            ..SynthConfig::default()
        };
        assert!(matches!(synth_generate(&too_many), Err(SsnError::Config(_))));
        let tiny_d = SynthConfig {
            d: 16,
            d_raw: 16,
            ..SynthConfig::default()
        };
        assert!(matches!(synth_generate(&tiny_d), Err(SsnError::Config(_))));
    }
}
