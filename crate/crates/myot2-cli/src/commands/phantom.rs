//! Synthetic dataset generation: randomized phantoms, optional augmentation
//! expansion, optional input noise (references stay clean).

use anyhow::{Context, Result};
use myot2_core::io::{write_subject, SubjectData};
use myot2_core::seed_mix;
use myot2_core::synth::{add_gaussian_noise, augment8, gen_phantom, PhantomSpec, Sample};
use std::path::Path;

fn to_subject(sample: Sample, noise: Option<f64>, noise_seed: u64) -> Result<SubjectData> {
    let volume = match noise {
        Some(std) => add_gaussian_noise(&sample.volume, std, noise_seed)?,
        None => sample.volume,
    };
    Ok(SubjectData { volume, labels: vec![sample.labels], t2: vec![sample.t2_truth] })
}

pub fn run(out: &Path, count: usize, augment: bool, noise: Option<f64>, seed: u64) -> Result<()> {
    anyhow::ensure!(count > 0, "--count must be positive");
    if let Some(std) = noise {
        anyhow::ensure!(std >= 0.0 && std.is_finite(), "--noise must be nonnegative");
    }
    std::fs::create_dir_all(out)?;
    let mut written = 0usize;
    for i in 0..count {
        // Sample i draws from its own seed stream so generation order (and
        // any future parallel split) cannot change the dataset.
        let spec = PhantomSpec::randomized(seed.wrapping_add(i as u64));
        let sample = gen_phantom(&spec).context("generating phantom")?;
        if augment {
            for (k, variant) in
                augment8(&sample, seed.wrapping_add(i as u64)).into_iter().enumerate()
            {
                let name = format!("s{i:03}v{k}");
                let subject =
                    to_subject(variant, noise, seed_mix(seed, ((i as u64) << 8) | k as u64))?;
                write_subject(out, &name, &subject)
                    .with_context(|| format!("writing subject {name}"))?;
                written += 1;
            }
        } else {
            let name = format!("s{i:03}");
            let subject = to_subject(sample, noise, seed_mix(seed, (i as u64) << 8))?;
            write_subject(out, &name, &subject)
                .with_context(|| format!("writing subject {name}"))?;
            written += 1;
        }
    }
    println!("wrote {written} subjects to {}", out.display());
    Ok(())
}
