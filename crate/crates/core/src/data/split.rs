//! A dataset split on disk (`annotations.json` plus `images/`) and the
//! per-image training samples derived from it.

use std::path::Path;

use super::coco::{load_coco, Dataset, ImageInfo};
use super::shapes::ShapesDataset;
use super::Image;
use crate::error::{invalid_arg, Error, Result};
use crate::geometry::BoxA;

pub const ANNOTATION_FILE: &str = "annotations.json";
pub const IMAGE_DIR: &str = "images";

/// Annotations plus the decoded images, `images[i]` belonging to `dataset.images[i]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub dataset: Dataset,
    pub images: Vec<Image>,
}

/// One image with its non-crowd objects; labels index the category table.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image_id: u64,
    pub image: Image,
    pub boxes: Vec<BoxA>,
    pub labels: Vec<usize>,
}

impl From<ShapesDataset> for Split {
    fn from(s: ShapesDataset) -> Self {
        Self {
            dataset: s.dataset,
            images: s.images,
        }
    }
}

impl Split {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let dataset = load_coco(&dir.join(ANNOTATION_FILE))?;
        let images = dataset
            .images
            .iter()
            .map(|info| {
                let path = dir.join(IMAGE_DIR).join(&info.file_name);
                if !path.exists() {
                    return Err(Error::MissingFile(path));
                }
                let img = Image::load(&path)?;
                if (img.width() as u32, img.height() as u32) != (info.width, info.height) {
                    return Err(Error::Annotation(format!(
                        "{} is {}x{}, annotations say {}x{}",
                        path.display(),
                        img.width(),
                        img.height(),
                        info.width,
                        info.height
                    )));
                }
                Ok(img)
            })
            .collect::<Result<_>>()?;
        Ok(Self { dataset, images })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let img_dir = dir.join(IMAGE_DIR);
        std::fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
        for (img, info) in self.images.iter().zip(&self.dataset.images) {
            img.save_png(&img_dir.join(&info.file_name))?;
        }
        self.dataset.save(&dir.join(ANNOTATION_FILE))
    }

    /// The images with the given ids, in id order.
    pub fn subset(&self, ids: &[u64]) -> Self {
        let dataset = self.dataset.subset(ids);
        let images = dataset
            .images
            .iter()
            .map(|i| {
                let k = self
                    .dataset
                    .images
                    .binary_search_by_key(&i.id, |x| x.id)
                    .expect("subset of own ids");
                self.images[k].clone()
            })
            .collect();
        Self { dataset, images }
    }

    pub fn samples(&self) -> Vec<Sample> {
        let by_image = self.dataset.records_by_image();
        self.dataset
            .images
            .iter()
            .zip(&self.images)
            .map(|(info, img)| {
                let recs: Vec<_> = by_image[&info.id].iter().filter(|r| !r.iscrowd).collect();
                Sample {
                    image_id: info.id,
                    image: img.clone(),
                    boxes: recs.iter().map(|r| r.bbox).collect(),
                    labels: recs
                        .iter()
                        .map(|r| self.dataset.category_index(r.category_id).expect("validated category"))
                        .collect(),
                }
            })
            .collect()
    }
}

/// Splits records ordered by `key` into the first `first_k` (validation)
/// and the rest (extra training data).
pub fn make_holdout_split<T: Clone>(records: &[T], first_k: usize, key: impl Fn(&T) -> u64) -> Result<(Vec<T>, Vec<T>)> {
    if first_k > records.len() {
        return Err(invalid_arg!(
            "holdout of {first_k} exceeds the {} available records",
            records.len()
        ));
    }
    let mut sorted = records.to_vec();
    sorted.sort_by_key(|r| key(r));
    let rest = sorted.split_off(first_k);
    Ok((sorted, rest))
}

/// Keeps the first `first_k` images of `val` by id for validation and
/// returns the remainder as extra training data.
pub fn holdout_split(val: &Split, first_k: usize) -> Result<(Split, Split)> {
    let (keep, extra) = make_holdout_split(&val.dataset.images, first_k, |i: &ImageInfo| i.id)?;
    let ids = |v: &[ImageInfo]| v.iter().map(|i| i.id).collect::<Vec<_>>();
    Ok((val.subset(&ids(&keep)), val.subset(&ids(&extra))))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_shapes, ShapesSpec};

    #[test]
    fn holdout_edges() {
        let v: Vec<u64> = vec![5, 3, 9];
        assert_eq!(make_holdout_split(&v, 3, |x| *x).unwrap(), (vec![3, 5, 9], vec![]));
        assert_eq!(make_holdout_split(&v, 0, |x| *x).unwrap(), (vec![], vec![3, 5, 9]));
        assert!(make_holdout_split(&v, 4, |x| *x).is_err());
    }

    #[test]
    fn disk_round_trip() {
        let spec = ShapesSpec {
            seed: 4,
            image_size: 48,
            size_bands: [[6, 10], [12, 20], [24, 30]],
            ..ShapesSpec::default()
        };
        let split = Split::from(generate_shapes(&spec, 5).unwrap());
        let dir = tempfile::tempdir().unwrap();
        split.save(dir.path()).unwrap();
        assert_eq!(Split::load(dir.path()).unwrap(), split);
        std::fs::remove_file(dir.path().join(IMAGE_DIR).join("000003.png")).unwrap();
        assert!(matches!(Split::load(dir.path()), Err(Error::MissingFile(_))));
    }

    #[test]
    fn holdout_split_keeps_pairs_aligned() {
        let split = Split::from(
            generate_shapes(
                &ShapesSpec {
                    image_size: 64,
                    size_bands: [[6, 10], [12, 20], [24, 30]],
                    ..ShapesSpec::default()
                },
                8,
            )
            .unwrap(),
        );
        let (val, extra) = holdout_split(&split, 3).unwrap();
        assert_eq!(val.dataset.images.iter().map(|i| i.id).collect::<Vec<_>>(), vec![1, 2, 3]);
        assert_eq!(extra.len(), 5);
        assert_eq!(extra.images[0], split.images[3]);
        let s = val.samples();
        assert_eq!(s.iter().map(|x| x.boxes.len()).sum::<usize>(), val.dataset.records.len());
    }
}
