//! Image-folder ingestion: a directory of image files plus a
//! `filename,label` CSV. Optional masks live in `<root>/masks/<filename>`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use super::{LabeledDataset, Mask};
use crate::error::{Error, Result};
use crate::raster::Image;

/// Loads every row of `labels_file`, resizing images to `size` (height,
/// width) by area averaging. Items are ordered by filename.
///
/// With `class_names = None` the classes are the sorted distinct labels;
/// otherwise any label outside the list is an error.
pub fn load_image_folder(
    root: &Path,
    labels_file: &Path,
    size: (usize, usize),
    class_names: Option<&[String]>,
) -> Result<LabeledDataset> {
    let mut reader = csv::Reader::from_path(labels_file)?;
    let headers = reader.headers()?.clone();
    if headers.len() < 2 || &headers[0] != "filename" || &headers[1] != "label" {
        return Err(Error::input(format!(
            "{}: header must be `filename,label`",
            labels_file.display()
        )));
    }
    let mut rows: BTreeMap<String, String> = BTreeMap::new();
    for record in reader.records() {
        let record = record?;
        rows.insert(record[0].trim().to_string(), record[1].trim().to_string());
    }
    if rows.is_empty() {
        return Err(Error::input(format!("{} lists no images", labels_file.display())));
    }

    let classes: Vec<String> = match class_names {
        Some(names) => names.to_vec(),
        None => rows.values().cloned().collect::<BTreeSet<_>>().into_iter().collect(),
    };
    let unknown: Vec<&str> = rows
        .values()
        .filter(|l| !classes.contains(l))
        .map(String::as_str)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if !unknown.is_empty() {
        return Err(Error::input(format!("unknown class name(s): {}", unknown.join(", "))));
    }
    let missing: Vec<&str> = rows
        .keys()
        .filter(|f| !root.join(f).is_file())
        .map(String::as_str)
        .collect();
    if !missing.is_empty() {
        return Err(Error::input(format!("missing image file(s): {}", missing.join(", "))));
    }

    let mask_dir = root.join("masks");
    let with_masks = rows.keys().all(|f| mask_dir.join(f).is_file());
    let mut items = Vec::with_capacity(rows.len());
    let mut masks = Vec::new();
    for (file, label) in &rows {
        let im = Image::load_png(&root.join(file))?.resize_area(size.0, size.1)?;
        let class = classes.iter().position(|c| c == label).expect("checked above");
        items.push((im, class));
        if with_masks {
            masks.push(Mask::load_png(&mask_dir.join(file))?.resize(size.0, size.1)?);
        }
    }
    LabeledDataset::new(items, classes, with_masks.then_some(masks))
}

/// Writes a dataset in the layout read by [`load_image_folder`]:
/// `img_<index>.png`, `labels.csv`, and `masks/` when masks exist.
pub fn export_image_folder(dataset: &LabeledDataset, root: &Path) -> Result<()> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let width = dataset.len().to_string().len().max(4);
    let mut writer = csv::Writer::from_path(root.join("labels.csv"))?;
    writer.write_record(["filename", "label"])?;
    if dataset.masks.is_some() {
        let dir = root.join("masks");
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    for (i, (im, label)) in dataset.items.iter().enumerate() {
        let name = format!("img_{i:0width$}.png");
        im.save_png(&root.join(&name))?;
        writer.write_record([name.as_str(), dataset.class_names[*label].as_str()])?;
        if let Some(masks) = &dataset.masks {
            masks[i].save_png(&root.join("masks").join(&name))?;
        }
    }
    writer.flush().map_err(|e| Error::io(root.join("labels.csv"), e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_synthetic_lesions;

    #[test]
    fn export_then_load() {
        let dir = tempfile::tempdir().unwrap();
        let ds = make_synthetic_lesions(6, 1).unwrap();
        export_image_folder(&ds, dir.path()).unwrap();
        let labels = dir.path().join("labels.csv");
        let back = load_image_folder(dir.path(), &labels, (32, 32), None).unwrap();
        assert_eq!(back.len(), 6);
        assert_eq!(back.num_classes(), 3);
        assert!(back.masks.is_some());
        let again = load_image_folder(dir.path(), &labels, (32, 32), None).unwrap();
        assert_eq!(back, again);
        // Sorted class names differ from synthetic order, labels are remapped.
        for ((_, a), (_, b)) in ds.items.iter().zip(&back.items) {
            assert_eq!(ds.class_names[*a], back.class_names[*b]);
        }
    }

    #[test]
    fn three_images_infer_classes() {
        let dir = tempfile::tempdir().unwrap();
        for name in ["c.png", "a.png", "b.png"] {
            Image::filled(4, 4, 3, 0.2).unwrap().save_png(&dir.path().join(name)).unwrap();
        }
        let labels = dir.path().join("labels.csv");
        fs::write(&labels, "filename,label\nc.png,mel\na.png,nev\nb.png,mel\n").unwrap();
        let ds = load_image_folder(dir.path(), &labels, (2, 2), None).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.class_names, vec!["mel", "nev"]);
        assert_eq!(ds.labels(), vec![1, 0, 0]);
        assert!(ds.masks.is_none());
    }

    #[test]
    fn missing_file_is_named() {
        let dir = tempfile::tempdir().unwrap();
        Image::filled(4, 4, 3, 0.2).unwrap().save_png(&dir.path().join("a.png")).unwrap();
        let labels = dir.path().join("labels.csv");
        fs::write(&labels, "filename,label\na.png,x\nghost.png,x\n").unwrap();
        match load_image_folder(dir.path(), &labels, (4, 4), None) {
            Err(Error::Input(msg)) => assert!(msg.contains("ghost.png")),
            other => panic!("expected input error, got {other:?}"),
        }
        let known = vec!["y".to_string()];
        match load_image_folder(dir.path(), &labels, (4, 4), Some(&known)) {
            Err(Error::Input(msg)) => assert!(msg.contains("unknown class")),
            other => panic!("expected input error, got {other:?}"),
        }
    }
}
