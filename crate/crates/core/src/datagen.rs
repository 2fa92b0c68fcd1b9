//! Toy corpus generation: hyperspectral subjects, simulated cameras and the
//! progressive-substitution variants, written as images plus manifests.

use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::camera::{apply_filters, sample_camera, variant_plan, FilterBank};
use crate::error::{CarlError, Result};
use crate::io::corpus::{Corpus, ManifestEntry, Split};
use crate::io::toy::make_toy_scene;
use crate::io::{write_image, SpectralImage};
use crate::rng::{Purpose, Streams};
use crate::run::DataSection;

pub const HSI_CAMERA: &str = "hsi";

pub fn camera_name(j: usize) -> String {
    format!("cam{j}")
}

/// Scene `i` of `subject`; subjects are numbered across train and test.
pub fn subject_scene(streams: &Streams, data: &DataSection, subject: usize, i: usize) -> Result<SpectralImage> {
    let index = (subject * data.images_per_subject + i) as u64;
    make_toy_scene(&mut streams.stream(Purpose::Scenes, index), None, &data.scene)
}

pub fn variant_cameras(streams: &Streams, n: usize) -> Result<Vec<FilterBank>> {
    (0..n).map(|j| sample_camera(&mut streams.stream(Purpose::Cameras, j as u64))).collect()
}

#[derive(Debug, Clone)]
pub struct GeneratedCorpus {
    /// `variant{k}.tsv` for `k = 0..=variants`.
    pub manifests: Vec<PathBuf>,
    pub cameras: Vec<PathBuf>,
}

/// Writes the corpus under `out`. Training subjects `2j` and `2j+1` are
/// rendered by camera `j` in every variant past `j`; test subjects stay
/// hyperspectral in all variants.
pub fn generate_corpus(out: &Path, data: &DataSection, seed: u64) -> Result<GeneratedCorpus> {
    if data.images_per_subject == 0 || data.test_subjects == 0 {
        return Err(CarlError::validation("need at least one image per subject and one test subject"));
    }
    data.scene.validate()?;
    let plan = variant_plan(data.subjects, data.variants)?;
    let streams = Streams::new(seed);
    let banks = variant_cameras(&streams, data.variants)?;
    let mut cameras = Vec::new();
    for (j, bank) in banks.iter().enumerate() {
        let p = out.join("cameras").join(format!("{}.txt", camera_name(j)));
        std::fs::create_dir_all(p.parent().expect("has parent")).map_err(|e| CarlError::io(out, e))?;
        bank.save(&p)?;
        cameras.push(p);
    }

    let total_subjects = data.subjects + data.test_subjects;
    let rel_hsi = |s: usize, i: usize| PathBuf::from(format!("hsi/s{s:02}/{i:03}.csp"));
    let rel_msi = |j: usize, s: usize, i: usize| PathBuf::from(format!("msi/{}/s{s:02}/{i:03}.csp", camera_name(j)));
    // subject -> camera that eventually converts it
    let converter = |s: usize| (s < 2 * data.variants).then_some(s / 2);
    (0..total_subjects)
        .into_par_iter()
        .try_for_each(|s| -> Result<()> {
            for i in 0..data.images_per_subject {
                let hsi = subject_scene(&streams, data, s, i)?;
                write_image(out.join(rel_hsi(s, i)), &hsi)?;
                if let (true, Some(j)) = (s < data.subjects, converter(s)) {
                    write_image(out.join(rel_msi(j, s, i)), &apply_filters(&banks[j], &hsi)?)?;
                }
            }
            Ok(())
        })?;

    let mut manifests = Vec::new();
    for (k, assignment) in plan.iter().enumerate() {
        let mut entries = Vec::new();
        for (s, cam) in assignment.iter().enumerate() {
            for i in 0..data.images_per_subject {
                let (path, camera) = match cam {
                    Some(j) => (rel_msi(*j, s, i), camera_name(*j)),
                    None => (rel_hsi(s, i), HSI_CAMERA.to_string()),
                };
                entries.push(ManifestEntry {
                    path,
                    subject: format!("s{s:02}"),
                    camera,
                    split: Split::Train,
                });
            }
        }
        for s in data.subjects..total_subjects {
            for i in 0..data.images_per_subject {
                entries.push(ManifestEntry {
                    path: rel_hsi(s, i),
                    subject: format!("s{s:02}"),
                    camera: HSI_CAMERA.to_string(),
                    split: Split::Test,
                });
            }
        }
        let p = out.join(format!("variant{k}.tsv"));
        Corpus::new(out, entries).save(&p)?;
        manifests.push(p);
    }
    Ok(GeneratedCorpus { manifests, cameras })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::is_canonical_grid;
    use crate::io::ToySceneConfig;

    fn small() -> DataSection {
        DataSection {
            subjects: 4,
            test_subjects: 1,
            images_per_subject: 2,
            variants: 2,
            scene: ToySceneConfig {
                size: 16,
                ..ToySceneConfig::default()
            },
        }
    }

    #[test]
    fn variants_convert_two_subjects_each() {
        let dir = tempfile::tempdir().unwrap();
        let g = generate_corpus(dir.path(), &small(), 3).unwrap();
        assert_eq!(g.manifests.len(), 3);
        assert_eq!(g.cameras.len(), 2);
        for (k, m) in g.manifests.iter().enumerate() {
            let c = Corpus::load(m).unwrap();
            let train = c.split(Split::Train);
            let msi: std::collections::BTreeSet<&str> =
                train.iter().filter(|e| e.camera != HSI_CAMERA).map(|e| e.subject.as_str()).collect();
            assert_eq!(msi.len(), 2 * k);
            for e in c.split(Split::Test) {
                assert!(is_canonical_grid(c.read(e).unwrap().wavelengths()));
            }
        }
        // geometry is shared across variants
        let v0 = Corpus::load(&g.manifests[0]).unwrap();
        let v2 = Corpus::load(&g.manifests[2]).unwrap();
        for (a, b) in v0.entries.iter().zip(&v2.entries) {
            let (a, b) = (v0.read(a).unwrap(), v2.read(b).unwrap());
            assert_eq!(a.labels(), b.labels());
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        generate_corpus(d1.path(), &small(), 9).unwrap();
        generate_corpus(d2.path(), &small(), 9).unwrap();
        for rel in ["variant2.tsv", "hsi/s03/001.csp", "msi/cam1/s02/000.csp", "cameras/cam0.txt"] {
            assert_eq!(std::fs::read(d1.path().join(rel)).unwrap(), std::fs::read(d2.path().join(rel)).unwrap(), "{rel}");
        }
    }

    #[test]
    fn too_few_subjects_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let data = DataSection {
            subjects: 3,
            ..small()
        };
        assert!(generate_corpus(dir.path(), &data, 0).is_err());
    }
}
