use std::fs;
use std::path::Path;

use super::image::Image;
use super::{Dataset, Sample};
use crate::error::{HerbsError, Result};

/// Loads `root/<class>/<image>` trees. A class directory named
/// `<generic>.<fine>` is filed under that generic class; any other name is
/// its own generic class. Classes and files are taken in sorted order.
pub fn load_folder(root: &Path) -> Result<Dataset> {
    let mut class_dirs: Vec<_> = fs::read_dir(root)?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .collect();
    class_dirs.sort();
    if class_dirs.is_empty() {
        return Err(HerbsError::Dataset(format!("no class directories under {}", root.display())));
    }
    let mut ds = Dataset::default();
    for (label, name) in class_dirs.iter().enumerate() {
        let generic_name = name.split_once('.').map_or(name.as_str(), |(g, _)| g).to_string();
        let generic = match ds.generic_names.iter().position(|g| *g == generic_name) {
            Some(g) => g,
            None => {
                ds.generic_names.push(generic_name);
                ds.generic_names.len() - 1
            }
        };
        ds.class_names.push(name.clone());
        ds.fine_to_generic.push(generic);
        let mut files: Vec<_> = fs::read_dir(root.join(name))?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| {
                p.extension()
                    .and_then(|x| x.to_str())
                    .is_some_and(|x| matches!(x.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
            })
            .collect();
        files.sort();
        for path in files {
            let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            ds.samples.push(Sample {
                id: format!("{name}/{stem}"),
                image: Image::load(&path)?,
                label,
                generic,
                mask: None,
            });
        }
    }
    if ds.samples.is_empty() {
        return Err(HerbsError::Dataset(format!("no images under {}", root.display())));
    }
    Ok(ds)
}
