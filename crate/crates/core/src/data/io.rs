//! On-disk layout: `root/{train,val,test}/{A,B,label}/<name>.png`, with an
//! optional `labels.txt` (`<name> <0|1>` per line) standing in for `label/`.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::{GrayImage, RgbImage};

use super::{derive_image_label, ImagePair};
use crate::cam::ImageLabel;
use crate::error::{Error, Result};
use crate::mask::BinaryMask;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train = 0,
    Val = 1,
    Test = 2,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|x| x.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown split `{s}`")))
    }
}

/// 8-bit label map: changed where the value is above 127.
pub fn binarize_label(img: &GrayImage) -> BinaryMask {
    let (w, h) = img.dimensions();
    BinaryMask::from_fn(h as usize, w as usize, |y, x| img.get_pixel(x as u32, y as u32).0[0] > 127)
}

pub fn load_rgb(path: &Path) -> Result<Tensor> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0; 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            data[(c * h + y as usize) * w + x as usize] = f64::from(px.0[c]) / 255.0;
        }
    }
    Ok(Tensor::new(&[3, h, w], data))
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Write a `[3, H, W]` image with values in `[0, 1]`.
pub fn save_rgb(img: &Tensor, path: &Path) -> Result<()> {
    let s = img.shape();
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let d = img.data();
    let out = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        image::Rgb([to_u8(d[i]), to_u8(d[h * w + i]), to_u8(d[2 * h * w + i])])
    });
    out.save(path)?;
    Ok(())
}

/// Write a single `[.., H, W]` plane with values in `[0, 1]` as 8-bit gray.
pub fn save_gray(plane: &Tensor, path: &Path) -> Result<()> {
    let s = plane.shape();
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let d = plane.data();
    GrayImage::from_fn(w as u32, h as u32, |x, y| image::Luma([to_u8(d[y as usize * w + x as usize])]))
        .save(path)?;
    Ok(())
}

/// Write a mask as 0/255.
pub fn save_mask(mask: &BinaryMask, path: &Path) -> Result<()> {
    let (h, w) = mask.dims();
    GrayImage::from_fn(w as u32, h as u32, |x, y| {
        image::Luma([if mask.get(y as usize, x as usize) { 255 } else { 0 }])
    })
    .save(path)?;
    Ok(())
}

fn list_pngs(dir: &Path) -> Result<Vec<String>> {
    let mut names = Vec::new();
    for entry in fs::read_dir(dir)? {
        let entry = entry?;
        if entry.file_type()?.is_file() {
            let name = entry.file_name().to_string_lossy().into_owned();
            if name.to_ascii_lowercase().ends_with(".png") {
                names.push(name);
            }
        }
    }
    names.sort();
    Ok(names)
}

fn stem(name: &str) -> &str {
    name.rsplit_once('.').map_or(name, |(s, _)| s)
}

fn read_labels_txt(path: &Path) -> Result<BTreeMap<String, ImageLabel>> {
    let text = fs::read_to_string(path)?;
    let mut out = BTreeMap::new();
    for (no, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split_whitespace();
        let (Some(name), Some(v), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(Error::Label(format!("{}:{}: expected `<name> <0|1>`", path.display(), no + 1)));
        };
        let label = match v {
            "0" => ImageLabel::UNCHANGED,
            "1" => ImageLabel::CHANGED,
            _ => return Err(Error::Label(format!("{}:{}: label must be 0 or 1", path.display(), no + 1))),
        };
        out.insert(stem(name).to_string(), label);
    }
    Ok(out)
}

/// Load one split in lexicographic filename order.
pub fn load_pair_dataset(root: &Path, split: Split) -> Result<Vec<ImagePair>> {
    let dir = root.join(split.as_str());
    let (a_dir, b_dir, label_dir) = (dir.join("A"), dir.join("B"), dir.join("label"));
    if !a_dir.is_dir() || !b_dir.is_dir() {
        return Err(Error::Layout(format!("{} needs both A/ and B/", dir.display())));
    }
    let a = list_pngs(&a_dir)?;
    let b = list_pngs(&b_dir)?;
    if a != b {
        let missing: Vec<_> = a
            .iter()
            .filter(|n| !b.contains(n))
            .chain(b.iter().filter(|n| !a.contains(n)))
            .take(5)
            .collect();
        return Err(Error::Layout(format!(
            "A/ and B/ in {} differ, e.g. {missing:?}",
            dir.display()
        )));
    }
    let sidecar = dir.join("labels.txt");
    let listed = if label_dir.is_dir() {
        None
    } else if sidecar.is_file() {
        Some(read_labels_txt(&sidecar)?)
    } else {
        return Err(Error::Label(format!(
            "{} has neither label/ nor labels.txt",
            dir.display()
        )));
    };
    let mut pairs = Vec::with_capacity(a.len());
    for name in &a {
        let pre = load_rgb(&a_dir.join(name))?;
        let post = load_rgb(&b_dir.join(name))?;
        let (gt, y_cls) = match &listed {
            None => {
                let path = label_dir.join(name);
                if !path.is_file() {
                    return Err(Error::Layout(format!("missing label {}", path.display())));
                }
                let gt = binarize_label(&image::open(&path)?.to_luma8());
                let y = derive_image_label(&gt);
                (Some(gt), y)
            }
            Some(map) => {
                let y = *map
                    .get(stem(name))
                    .ok_or_else(|| Error::Label(format!("labels.txt has no entry for {name}")))?;
                (None, y)
            }
        };
        pairs.push(ImagePair::new(stem(name), pre, post, y_cls, gt)?);
    }
    Ok(pairs)
}

/// Write pairs in the loadable layout, including a `labels.txt` sidecar.
pub fn write_split(root: &Path, split: Split, pairs: &[ImagePair]) -> Result<PathBuf> {
    let dir = root.join(split.as_str());
    for sub in ["A", "B", "label"] {
        fs::create_dir_all(dir.join(sub))?;
    }
    let mut listing = String::new();
    for p in pairs {
        let file = format!("{}.png", p.id);
        save_rgb(&p.pre, &dir.join("A").join(&file))?;
        save_rgb(&p.post, &dir.join("B").join(&file))?;
        if let Some(gt) = &p.gt {
            save_mask(gt, &dir.join("label").join(&file))?;
        }
        listing.push_str(&format!("{} {}\n", p.id, p.y_cls));
    }
    fs::write(dir.join("labels.txt"), listing)?;
    Ok(dir)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binarize_threshold() {
        let mut img = GrayImage::new(2, 1);
        img.put_pixel(0, 0, image::Luma([127]));
        assert!(!binarize_label(&img).any());
        img.put_pixel(1, 0, image::Luma([128]));
        assert_eq!(binarize_label(&img).data(), &[0, 1]);
    }

    #[test]
    fn split_names() {
        for s in Split::ALL {
            assert_eq!(s.as_str().parse::<Split>().unwrap(), s);
        }
        assert!("dev".parse::<Split>().is_err());
    }
}
