//! Images, COCO-schema annotations and the synthetic shapes generator.

mod coco;
mod image;
mod shapes;
mod split;

pub use coco::{
    load_coco, save_results, to_results, AnnotationRecord, Category, Dataset, ImageInfo, ImagePredictions, ResultRecord,
};
pub use image::Image;
pub use shapes::{
    generate_shapes, render_one, shape_categories, shape_contains, GenerationPlan, ShapesDataset, ShapesSpec, SHAPE_NAMES,
};
pub use split::{holdout_split, make_holdout_split, Sample, Split, ANNOTATION_FILE, IMAGE_DIR};
