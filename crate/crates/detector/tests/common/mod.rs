#![allow(dead_code)]

use rand::Rng as _;
use rand_distr::StandardNormal;

use incoforge_core::seed::rng_for;
use incoforge_core::Mode;
use incoforge_detector::{Example, InputMode, ModelInput, Scalar, TransformerConfig};

pub fn small_config(layers: usize, d_embed: usize) -> TransformerConfig {
    TransformerConfig { n_layers: layers, dropout: 0.0, ..TransformerConfig::desk(InputMode::Sentence, d_embed, 0) }
}

fn unit(rng: &mut incoforge_core::seed::Rng, d: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

/// Random sentence-mode examples with `n` sentences; DSD labels one per
/// sentence, MSD one per slot.
pub fn random_examples<T: Scalar>(count: usize, n: usize, d_embed: usize, task: Mode, seed: u64) -> Vec<Example<T>> {
    let mut rng = rng_for(seed, "examples");
    (0..count)
        .map(|i| {
            let data: Vec<T> = (0..n).flat_map(|_| unit(&mut rng, d_embed)).map(T::of).collect();
            let n_labels = if task == Mode::Msd { n - 1 } else { n };
            let mut labels: Vec<u8> = (0..n_labels).map(|_| rng.random_bool(0.3) as u8).collect();
            labels[i % n_labels] = 1;
            let sm_targets = labels
                .iter()
                .enumerate()
                .filter(|(_, &y)| y == 1)
                .map(|(k, _)| (k, unit(&mut rng, d_embed).into_iter().map(T::of).collect()))
                .collect();
            Example {
                id: format!("ex{i}"),
                task,
                input: ModelInput::Sentences { data, n },
                reps: (0..n_labels).collect(),
                labels,
                sm_targets,
            }
        })
        .collect()
}
