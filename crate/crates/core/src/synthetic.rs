//! Seeded synthetic datasets: sparse dictionary data and a labelled task
//! whose class identity is carried by sparse atoms on top of a shared offset.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::bundle::{ClassifierHead, EmbeddingBundle};
use crate::error::Result;
use crate::linalg;

fn unit_gaussian(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let n = linalg::norm(&v);
        if n > 1e-8 {
            return linalg::scale(&v, 1.0 / n);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DictionarySpec {
    pub dim: usize,
    pub atoms: usize,
    pub sparsity: usize,
    /// Active coefficients are uniform in `[coef_min, coef_max)`.
    pub coef_min: f64,
    pub coef_max: f64,
    pub noise: f64,
    pub samples: usize,
    pub held_out: usize,
    pub seed: u64,
}

impl Default for DictionarySpec {
    fn default() -> Self {
        Self {
            dim: 64,
            atoms: 128,
            sparsity: 8,
            coef_min: 0.1,
            coef_max: 1.0,
            noise: 0.01,
            samples: 20_000,
            held_out: 2_000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DictionaryData {
    /// Unit-norm atoms, one per row.
    pub dictionary: Vec<Vec<f64>>,
    pub train: EmbeddingBundle,
    pub test: EmbeddingBundle,
}

/// `x = D z + noise` with `sparsity` active atoms per sample.
pub fn dictionary_data(spec: &DictionarySpec) -> Result<DictionaryData> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let dictionary: Vec<Vec<f64>> = (0..spec.atoms)
        .map(|_| unit_gaussian(&mut rng, spec.dim))
        .collect();
    let noise = Normal::new(0.0, spec.noise.max(0.0)).expect("valid sigma");
    let mut draw = |count: usize| -> Vec<Vec<f64>> {
        (0..count)
            .map(|_| {
                let mut x: Vec<f64> = (0..spec.dim).map(|_| noise.sample(&mut rng)).collect();
                for a in sample(&mut rng, spec.atoms, spec.sparsity) {
                    let c = rng.random_range(spec.coef_min..spec.coef_max);
                    linalg::axpy(c, &dictionary[a], &mut x);
                }
                x
            })
            .collect()
    };
    let train = draw(spec.samples);
    let test = draw(spec.held_out);
    Ok(DictionaryData {
        dictionary,
        train: EmbeddingBundle::from_rows(&train, None, vec![])?,
        test: EmbeddingBundle::from_rows(&test, None, vec![])?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassTaskSpec {
    pub dim: usize,
    pub classes: usize,
    /// Class-agnostic atoms mixed into every sample.
    pub nuisance_atoms: usize,
    pub nuisance_per_sample: usize,
    pub class_scale: f64,
    pub nuisance_scale: f64,
    /// Norm of the offset shared by every sample.
    pub offset: f64,
    pub noise: f64,
    /// Weight of the shared offset inside each head prototype, scaled per
    /// class by a uniform draw.
    pub head_offset: f64,
    pub head_noise: f64,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub seed: u64,
}

impl Default for ClassTaskSpec {
    fn default() -> Self {
        Self {
            dim: 32,
            classes: 10,
            nuisance_atoms: 16,
            nuisance_per_sample: 2,
            class_scale: 1.0,
            nuisance_scale: 0.8,
            offset: 3.0,
            noise: 0.05,
            head_offset: 0.6,
            head_noise: 0.5,
            train_per_class: 200,
            test_per_class: 100,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ClassTask {
    pub class_atoms: Vec<Vec<f64>>,
    pub offset: Vec<f64>,
    pub train: EmbeddingBundle,
    pub test: EmbeddingBundle,
    pub head: ClassifierHead,
}

pub fn class_names(classes: usize) -> Vec<String> {
    (0..classes).map(|c| format!("class_{c}")).collect()
}

/// Labelled task: each sample is the shared offset plus a scaled class atom,
/// a few nuisance atoms and Gaussian noise. The head's prototypes are noisy
/// class atoms that also lean toward the offset by a class-specific amount.
pub fn class_task(spec: &ClassTaskSpec) -> Result<ClassTask> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let offset = linalg::scale(&unit_gaussian(&mut rng, spec.dim), spec.offset);
    let offset_dir = linalg::scale(&offset, 1.0 / spec.offset.max(f64::MIN_POSITIVE));
    let class_atoms: Vec<Vec<f64>> = (0..spec.classes)
        .map(|_| unit_gaussian(&mut rng, spec.dim))
        .collect();
    let nuisance: Vec<Vec<f64>> = (0..spec.nuisance_atoms)
        .map(|_| unit_gaussian(&mut rng, spec.dim))
        .collect();
    let noise = Normal::new(0.0, spec.noise.max(0.0)).expect("valid sigma");

    let prototypes: Vec<Vec<f64>> = class_atoms
        .iter()
        .map(|a| {
            let mut p = a.clone();
            linalg::axpy(spec.head_noise, &unit_gaussian(&mut rng, spec.dim), &mut p);
            linalg::axpy(
                spec.head_offset * rng.random_range(0.0..1.0),
                &offset_dir,
                &mut p,
            );
            p
        })
        .collect();

    let mut draw = |per_class: usize| -> (Vec<Vec<f64>>, Vec<u32>) {
        let mut rows = Vec::with_capacity(per_class * spec.classes);
        let mut labels = Vec::with_capacity(per_class * spec.classes);
        for i in 0..per_class * spec.classes {
            let c = i % spec.classes;
            let mut x = offset.clone();
            for v in x.iter_mut() {
                *v += noise.sample(&mut rng);
            }
            let s = spec.class_scale * rng.random_range(0.7..1.3);
            linalg::axpy(s, &class_atoms[c], &mut x);
            let k = spec.nuisance_per_sample.min(spec.nuisance_atoms);
            for a in sample(&mut rng, spec.nuisance_atoms, k) {
                let s = spec.nuisance_scale * rng.random_range(0.5..1.5);
                linalg::axpy(s, &nuisance[a], &mut x);
            }
            rows.push(x);
            labels.push(c as u32);
        }
        (rows, labels)
    };
    let (train_rows, train_labels) = draw(spec.train_per_class);
    let (test_rows, test_labels) = draw(spec.test_per_class);
    let names = class_names(spec.classes);
    let mut train = EmbeddingBundle::from_rows(&train_rows, Some(train_labels), names.clone())?;
    let mut test = EmbeddingBundle::from_rows(&test_rows, Some(test_labels), names.clone())?;
    for (b, split) in [(&mut train, "train"), (&mut test, "test")] {
        *b = b.with_ids((0..b.rows()).map(|i| format!("{split}_{i}")).collect())?;
        b.meta_mut().insert("source".into(), "synthetic".into());
        b.meta_mut().insert("split".into(), split.into());
    }
    Ok(ClassTask {
        class_atoms,
        offset,
        train,
        test,
        head: ClassifierHead::new(prototypes, names)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dictionary_shapes_and_determinism() {
        let spec = DictionarySpec {
            samples: 50,
            held_out: 10,
            ..Default::default()
        };
        let a = dictionary_data(&spec).unwrap();
        let b = dictionary_data(&spec).unwrap();
        assert_eq!(a.train.rows(), 50);
        assert_eq!(a.test.rows(), 10);
        assert_eq!(a.train.dim(), 64);
        assert_eq!(a.train.data(), b.train.data());
        for atom in &a.dictionary {
            assert!((linalg::norm(atom) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn class_task_is_balanced() {
        let t = class_task(&ClassTaskSpec::default()).unwrap();
        let labels = t.train.labels().unwrap();
        for c in 0..10u32 {
            assert_eq!(labels.iter().filter(|&&l| l == c).count(), 200);
        }
        assert_eq!(t.head.num_classes(), 10);
        assert_eq!(t.test.rows(), 1000);
    }
}
