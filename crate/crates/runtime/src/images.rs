//! Where task images come from.

use skyvi_core::io::{image_path, read_image, read_image_meta};
use skyvi_core::model::{ImageMeta, ImagePatch};
use skyvi_core::{Error as CoreError, Result as CoreResult};
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

pub trait ImageSource: Send + Sync {
    fn meta(&self, id: usize) -> CoreResult<ImageMeta>;
    fn load(&self, id: usize) -> CoreResult<ImagePatch>;
}

/// Survey directory with one `image_NNNNN.clim` file per image id.
#[derive(Clone, Debug)]
pub struct DirImages {
    pub dir: PathBuf,
}

impl ImageSource for DirImages {
    fn meta(&self, id: usize) -> CoreResult<ImageMeta> {
        read_image_meta(&image_path(&self.dir, id))
    }

    fn load(&self, id: usize) -> CoreResult<ImagePatch> {
        read_image(&image_path(&self.dir, id))
    }
}

/// Images held in memory, optionally with an artificial per-image delay.
#[derive(Clone, Debug)]
pub struct MemImages {
    pub patches: Arc<Vec<ImagePatch>>,
    pub delay: Duration,
}

impl MemImages {
    pub fn new(patches: Vec<ImagePatch>) -> Self {
        MemImages {
            patches: Arc::new(patches),
            delay: Duration::ZERO,
        }
    }
}

impl ImageSource for MemImages {
    fn meta(&self, id: usize) -> CoreResult<ImageMeta> {
        self.patches
            .get(id)
            .map(|p| p.meta.clone())
            .ok_or_else(|| CoreError::Validation(format!("no image {id}")))
    }

    fn load(&self, id: usize) -> CoreResult<ImagePatch> {
        if !self.delay.is_zero() {
            std::thread::sleep(self.delay);
        }
        self.patches
            .get(id)
            .cloned()
            .ok_or_else(|| CoreError::Validation(format!("no image {id}")))
    }
}
