use std::fs;
use std::path::Path;

use image::{GrayImage, RgbImage};

use super::{Dataset, Image, Sample, SceneSpec, Splits, StagePlan};
use crate::error::{Error, Result};
use crate::losses::LabelMap;

/// Subset directory names: training subsets in stage order, then the test set.
pub const SPLIT_NAMES: [&str; 4] = ["d1", "d2", "d3", "test"];
const PLAN_FILE: &str = "plan.json";
const SCENE_FILE: &str = "scene.json";

/// Writes `<root>/<subset>/img_<i>.png`, `lab_<i>.png` and `full_<i>.png`
/// (the complete label map), plus `plan.json` and, if given, `scene.json`.
pub fn write_dataset(
    root: &Path,
    plan: &StagePlan,
    scene: Option<&SceneSpec>,
    splits: &Splits,
) -> Result<()> {
    plan.validate()?;
    if splits.train.len() != plan.stages() {
        return Err(Error::Data(format!(
            "{} training subsets for a {}-stage plan",
            splits.train.len(),
            plan.stages()
        )));
    }
    fs::create_dir_all(root)?;
    fs::write(root.join(PLAN_FILE), serde_json::to_string_pretty(plan)? + "\n")?;
    if let Some(scene) = scene {
        fs::write(root.join(SCENE_FILE), serde_json::to_string_pretty(scene)? + "\n")?;
    }
    let named = splits
        .train
        .iter()
        .enumerate()
        .map(|(k, d)| (SPLIT_NAMES[k], d))
        .chain(std::iter::once((SPLIT_NAMES[3], &splits.test)));
    for (name, d) in named {
        let dir = root.join(name);
        fs::create_dir_all(&dir)?;
        for (i, s) in d.samples.iter().enumerate() {
            let img = RgbImage::from_raw(s.image.width as u32, s.image.height as u32, s.image.pixels.clone())
                .ok_or_else(|| Error::Data("image buffer size".into()))?;
            img.save(dir.join(format!("img_{i}.png")))?;
            save_labels(&dir.join(format!("lab_{i}.png")), &s.labels)?;
            save_labels(&dir.join(format!("full_{i}.png")), &s.full_labels)?;
        }
    }
    Ok(())
}

fn save_labels(path: &Path, l: &LabelMap) -> Result<()> {
    let img = GrayImage::from_raw(l.width() as u32, l.height() as u32, l.values().to_vec())
        .ok_or_else(|| Error::Data("label buffer size".into()))?;
    img.save(path)?;
    Ok(())
}

fn load_labels(path: &Path) -> Result<LabelMap> {
    let img = image::open(path)?.into_luma8();
    let (w, h) = img.dimensions();
    LabelMap::new(h as usize, w as usize, img.into_raw())
}

/// Reads a dataset in the layout of [`write_dataset`]. Images are read as
/// `img_0.png, img_1.png, ...` until the first gap; `full_<i>.png` is
/// optional and defaults to the stage labels.
pub fn read_dataset(root: &Path) -> Result<(StagePlan, Splits)> {
    let plan_path = root.join(PLAN_FILE);
    let text = fs::read_to_string(&plan_path)
        .map_err(|e| Error::Data(format!("{}: {e}", plan_path.display())))?;
    let plan: StagePlan = serde_json::from_str(&text)?;
    plan.validate()?;
    let mut train = Vec::with_capacity(plan.stages());
    for name in &SPLIT_NAMES[..plan.stages()] {
        train.push(read_subset(&root.join(name))?);
    }
    let test = read_subset(&root.join(SPLIT_NAMES[3]))?;
    Ok((plan, Splits { train, test }))
}

/// The scene spec stored next to a generated dataset, if any.
pub fn read_scene(root: &Path) -> Result<Option<SceneSpec>> {
    let path = root.join(SCENE_FILE);
    if !path.exists() {
        return Ok(None);
    }
    Ok(Some(serde_json::from_str(&fs::read_to_string(path)?)?))
}

fn read_subset(dir: &Path) -> Result<Dataset> {
    if !dir.is_dir() {
        return Err(Error::Data(format!("missing subset directory {}", dir.display())));
    }
    let mut samples = Vec::new();
    for i in 0.. {
        let img_path = dir.join(format!("img_{i}.png"));
        if !img_path.exists() {
            break;
        }
        let rgb = image::open(&img_path)?.into_rgb8();
        let (w, h) = rgb.dimensions();
        let image = Image::new(h as usize, w as usize, rgb.into_raw())?;
        let labels = load_labels(&dir.join(format!("lab_{i}.png")))?;
        if labels.height() != image.height || labels.width() != image.width {
            return Err(Error::Data(format!("{}: label size differs from image", img_path.display())));
        }
        let full_path = dir.join(format!("full_{i}.png"));
        let full_labels = if full_path.exists() {
            load_labels(&full_path)?
        } else {
            labels.clone()
        };
        samples.push(Sample {
            image,
            labels,
            full_labels,
        });
    }
    if samples.is_empty() {
        return Err(Error::Data(format!("no images in {}", dir.display())));
    }
    Ok(Dataset { samples })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate;

    #[test]
    fn disk_round_trip() {
        let plan = StagePlan {
            sizes: vec![2, 2, 2, 2],
            ..StagePlan::default()
        };
        let spec = SceneSpec::default();
        let splits = generate(&spec, &plan).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &plan, Some(&spec), &splits).unwrap();
        for name in SPLIT_NAMES {
            assert!(dir.path().join(name).join("img_1.png").exists());
        }
        let (p2, s2) = read_dataset(dir.path()).unwrap();
        assert_eq!(p2, plan);
        assert_eq!(s2, splits);
        assert_eq!(read_scene(dir.path()).unwrap(), Some(spec));
    }

    #[test]
    fn missing_directory_reported() {
        let dir = tempfile::tempdir().unwrap();
        assert!(read_dataset(dir.path()).is_err());
    }
}
