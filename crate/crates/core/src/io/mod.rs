pub mod checkpoint;
pub mod corpus;
pub mod image;
pub mod toy;

pub use checkpoint::Checkpoint;
pub use corpus::{Corpus, ManifestEntry, Split};
pub use image::{read_image, write_image, SpectralImage, UNLABELED};
pub use toy::{make_toy_scene, reference_spectra, ToySceneConfig};
