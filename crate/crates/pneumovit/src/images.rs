//! Image decoding and encoding, folder datasets and the metadata filter.

use std::fs;
use std::path::{Path, PathBuf};

use pneumovit_core::data::{resize_bilinear, LabeledImage};
use pneumovit_core::{Real, Tensor};

use crate::error::{AppError, AppResult};

/// Class subfolders, indexed by label.
pub const CLASS_DIRS: [&str; 2] = ["normal", "pneumonia"];

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
        .unwrap_or(false)
}

/// Decodes a PNG or JPEG into `[size, size, 3]` values in `[0, 1]`.
pub fn load_image(path: &Path, size: usize) -> AppResult<Tensor> {
    let img = image::open(path)
        .map_err(|e| AppError::Data(format!("{}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data: Vec<Real> = img.as_raw().iter().map(|&b| b as Real / 255.0).collect();
    let t = Tensor::new(&[h, w, 3], data).map_err(AppError::from_core)?;
    let out = resize_bilinear(&t, size, size).map_err(AppError::from_core)?;
    Ok(out.map(|v| v.clamp(0.0, 1.0)))
}

/// Writes `[H, W, C]` values in `[0, 1]` as an 8-bit RGB PNG (C = 1 is
/// replicated, C ≥ 3 uses the first three channels).
pub fn save_png(path: &Path, pixels: &Tensor) -> AppResult<()> {
    let s = pixels.shape();
    if s.len() != 3 || !(s[2] == 1 || s[2] >= 3) {
        return Err(AppError::Runtime(format!(
            "cannot encode shape {s:?} as RGB"
        )));
    }
    let (h, w, c) = (s[0], s[1], s[2]);
    let mut buf = Vec::with_capacity(h * w * 3);
    for px in pixels.data().chunks(c) {
        for k in 0..3 {
            let v = if c == 1 { px[0] } else { px[k] };
            buf.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    image::save_buffer(path, &buf, w as u32, h as u32, image::ColorType::Rgb8)
        .map_err(|e| AppError::Runtime(format!("{}: {e}", path.display())))
}

fn sorted_images(dir: &Path) -> AppResult<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| AppError::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && is_image(p))
        .collect();
    files.sort();
    Ok(files)
}

/// Loads `root/normal/*` (label 0) and `root/pneumonia/*` (label 1),
/// resized to `size × size`. Unreadable files are skipped with a warning;
/// a missing or empty class folder is a data error.
pub fn load_folder(root: &Path, size: usize) -> AppResult<Vec<LabeledImage>> {
    let mut out = Vec::new();
    for (label, name) in CLASS_DIRS.iter().enumerate() {
        let dir = root.join(name);
        if !dir.is_dir() {
            return Err(AppError::Data(format!(
                "missing class folder {}",
                dir.display()
            )));
        }
        let mut loaded = 0;
        for path in sorted_images(&dir)? {
            match load_image(&path, size) {
                Ok(pixels) => {
                    let id = format!("{name}/{}", path.file_name().unwrap().to_string_lossy());
                    out.push(
                        LabeledImage::new(pixels, label as u8, id).map_err(AppError::from_core)?,
                    );
                    loaded += 1;
                }
                Err(e) => log::warn!("skipping {}: {e}", path.display()),
            }
        }
        if loaded == 0 {
            return Err(AppError::Data(format!(
                "class folder {} has no readable images",
                dir.display()
            )));
        }
    }
    Ok(out)
}

/// Writes images as `root/normal/<id>.png` and `root/pneumonia/<id>.png`.
pub fn write_folder(root: &Path, images: &[LabeledImage]) -> AppResult<()> {
    for name in CLASS_DIRS {
        let dir = root.join(name);
        fs::create_dir_all(&dir).map_err(|e| AppError::io(&dir, e))?;
    }
    for im in images {
        let file = format!("{}.png", im.source_id.replace(['/', '\\'], "_"));
        save_png(
            &root.join(CLASS_DIRS[im.label as usize]).join(file),
            &im.pixels,
        )?;
    }
    Ok(())
}

/// Column names and accepted view values for [`filter_metadata`].
#[derive(Clone, Debug, PartialEq)]
pub struct FilterRules {
    pub path_column: String,
    pub view_column: String,
    pub label_column: String,
    /// Case-insensitive view values that count as frontal.
    pub frontal_views: Vec<String>,
}

impl Default for FilterRules {
    fn default() -> Self {
        FilterRules {
            path_column: "path".into(),
            view_column: "view".into(),
            label_column: "label".into(),
            frontal_views: vec!["frontal".into(), "pa".into()],
        }
    }
}

/// Keeps frontal rows labelled 0 or 1, in file order. Rows labelled -1 or
/// left blank are dropped; a missing column is a data error naming it.
pub fn filter_metadata(csv_path: &Path, rules: &FilterRules) -> AppResult<Vec<(PathBuf, u8)>> {
    let mut rdr = csv::Reader::from_path(csv_path)
        .map_err(|e| AppError::Data(format!("{}: {e}", csv_path.display())))?;
    let headers = rdr
        .headers()
        .map_err(|e| AppError::Data(format!("{}: {e}", csv_path.display())))?
        .clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| {
                AppError::Data(format!("{}: missing column '{name}'", csv_path.display()))
            })
    };
    let (pc, vc, lc) = (
        col(&rules.path_column)?,
        col(&rules.view_column)?,
        col(&rules.label_column)?,
    );
    let base = csv_path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let row = row.map_err(|e| AppError::Data(format!("{}: {e}", csv_path.display())))?;
        let view = row.get(vc).unwrap_or("").trim();
        if !rules
            .frontal_views
            .iter()
            .any(|f| f.eq_ignore_ascii_case(view))
        {
            continue;
        }
        let label = match row.get(lc).unwrap_or("").trim() {
            "1" | "1.0" => 1,
            "0" | "0.0" => 0,
            "-1" | "-1.0" | "" => continue,
            other => {
                return Err(AppError::Data(format!(
                    "{}: row {}: label '{other}' not in {{1, 0, -1}}",
                    csv_path.display(),
                    i + 2
                )))
            }
        };
        out.push((base.join(row.get(pc).unwrap_or("").trim()), label));
    }
    Ok(out)
}

/// Loads the images listed by [`filter_metadata`], skipping unreadable ones.
pub fn load_metadata(
    csv_path: &Path,
    rules: &FilterRules,
    size: usize,
) -> AppResult<Vec<LabeledImage>> {
    let mut out = Vec::new();
    for (path, label) in filter_metadata(csv_path, rules)? {
        match load_image(&path, size) {
            Ok(px) => out.push(
                LabeledImage::new(px, label, path.to_string_lossy().into_owned())
                    .map_err(AppError::from_core)?,
            ),
            Err(e) => log::warn!("skipping {}: {e}", path.display()),
        }
    }
    Ok(out)
}
