//! Where synthetic images go and where database images come from.

use std::collections::HashMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::RwLock;

use crate::gateway::payload::encode_vector_png;
use crate::gateway::{ImageBlob, ImageOrigin};
use crate::IndexSnapshot;

/// Sink for generated images. `put` returns the reference under which the
/// image can be fetched again.
pub trait ImageStore: Send + Sync {
    fn put(&self, name: &str, blob: &ImageBlob) -> io::Result<String>;
    fn get(&self, reference: &str) -> Option<ImageBlob>;
}

#[derive(Debug, Default)]
pub struct MemoryImageStore {
    images: RwLock<HashMap<String, ImageBlob>>,
}

impl MemoryImageStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.images.read().expect("image store lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl ImageStore for MemoryImageStore {
    fn put(&self, name: &str, blob: &ImageBlob) -> io::Result<String> {
        let reference = format!("{name}.{}", blob.format().extension());
        self.images
            .write()
            .expect("image store lock")
            .insert(reference.clone(), blob.clone());
        Ok(reference)
    }

    fn get(&self, reference: &str) -> Option<ImageBlob> {
        self.images
            .read()
            .expect("image store lock")
            .get(reference)
            .cloned()
    }
}

/// Writes images as files under `base/subdir`; references are the relative
/// path `subdir/<name>.<ext>`.
#[derive(Debug, Clone)]
pub struct DirImageStore {
    base: PathBuf,
    subdir: String,
}

impl DirImageStore {
    pub fn new(base: impl Into<PathBuf>, subdir: impl Into<String>) -> io::Result<Self> {
        let store = Self {
            base: base.into(),
            subdir: subdir.into(),
        };
        fs::create_dir_all(store.base.join(&store.subdir))?;
        Ok(store)
    }

    fn safe_path(&self, reference: &str) -> Option<PathBuf> {
        let rel = Path::new(reference);
        if rel.is_absolute()
            || rel
                .components()
                .any(|c| !matches!(c, std::path::Component::Normal(_)))
        {
            return None;
        }
        Some(self.base.join(rel))
    }
}

impl ImageStore for DirImageStore {
    fn put(&self, name: &str, blob: &ImageBlob) -> io::Result<String> {
        let reference = format!("{}/{name}.{}", self.subdir, blob.format().extension());
        let path = self
            .safe_path(&reference)
            .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, "unsafe image name"))?;
        fs::write(path, blob.bytes())?;
        Ok(reference)
    }

    fn get(&self, reference: &str) -> Option<ImageBlob> {
        let bytes = fs::read(self.safe_path(reference)?).ok()?;
        ImageBlob::sniff(bytes, ImageOrigin::Generated).ok()
    }
}

/// Source of database image bytes (targets, prediction feedback, UI).
pub trait DatabaseImages: Send + Sync {
    fn load(&self, index: &IndexSnapshot, id: &str) -> Result<ImageBlob, String>;
}

/// Renders the stored embedding itself as a mock PNG payload. Pairs with the
/// mock world, where an image *is* its vector.
#[derive(Debug, Default, Clone, Copy)]
pub struct EmbeddedImages;

impl DatabaseImages for EmbeddedImages {
    fn load(&self, index: &IndexSnapshot, id: &str) -> Result<ImageBlob, String> {
        let pos = index
            .position(id)
            .ok_or_else(|| format!("unknown image {id:?}"))?;
        Ok(encode_vector_png(index.vector_at(pos), ImageOrigin::Database))
    }
}

/// Reads image files from a list of roots, trying `uri` verbatim and then
/// with `.png`, `.jpg` and `.jpeg` appended.
#[derive(Debug, Clone)]
pub struct FsImages {
    roots: Vec<PathBuf>,
}

impl FsImages {
    pub fn new(roots: Vec<PathBuf>) -> Self {
        Self { roots }
    }
}

impl DatabaseImages for FsImages {
    fn load(&self, index: &IndexSnapshot, id: &str) -> Result<ImageBlob, String> {
        let pos = index
            .position(id)
            .ok_or_else(|| format!("unknown image {id:?}"))?;
        let uri = index.uri_at(pos);
        if Path::new(uri).components().any(|c| {
            matches!(
                c,
                std::path::Component::ParentDir | std::path::Component::RootDir
            )
        }) {
            return Err(format!("refusing locator {uri:?}"));
        }
        for root in &self.roots {
            for suffix in ["", ".png", ".jpg", ".jpeg"] {
                let path = root.join(format!("{uri}{suffix}"));
                if path.is_file() {
                    let bytes = fs::read(&path).map_err(|e| format!("{}: {e}", path.display()))?;
                    return ImageBlob::sniff(bytes, ImageOrigin::Database)
                        .map_err(|e| format!("{}: {e}", path.display()));
                }
            }
        }
        Err(format!("no image file for {id:?} under the configured roots"))
    }
}
