//! Lossless image-sequence I/O.
//!
//! A sequence is a directory of PNG files whose stems are frame numbers
//! (`000000.png`, `000001.png`, ...). Any zero-padding width is accepted on
//! load; frames are written as `%06d.png`, 8 bits per channel.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageBuffer, Luma, Rgb};

use crate::error::{Error, Result};
use crate::frame::{Frame, VideoSequence, DEFAULT_FPS};

fn numbered_images(dir: &Path) -> Result<Vec<(u64, PathBuf)>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        let is_png = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if !is_png {
            continue;
        }
        let Some(index) = path
            .file_stem()
            .and_then(|s| s.to_str())
            .and_then(|s| s.parse::<u64>().ok())
        else {
            continue;
        };
        files.push((index, path));
    }
    files.sort();
    Ok(files)
}

pub fn load_frame(path: &Path) -> Result<Frame> {
    let img = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(source) => Error::io(path, source),
        other => Error::Image {
            path: path.to_path_buf(),
            message: other.to_string(),
        },
    })?;
    let (width, height) = (img.width() as usize, img.height() as usize);
    let (channels, data): (usize, Vec<f32>) = match img {
        DynamicImage::ImageLuma8(buf) => (1, buf.into_raw().into_iter().map(|v| v as f32 / 255.0).collect()),
        DynamicImage::ImageLuma16(buf) => (1, buf.into_raw().into_iter().map(|v| v as f32 / 65535.0).collect()),
        DynamicImage::ImageRgb16(_) | DynamicImage::ImageRgba16(_) => {
            let buf = img.to_rgb16();
            (3, buf.into_raw().into_iter().map(|v| v as f32 / 65535.0).collect())
        }
        other => {
            let buf = other.to_rgb8();
            (3, buf.into_raw().into_iter().map(|v| v as f32 / 255.0).collect())
        }
    };
    Frame::new(height, width, channels, data).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Loads every numbered PNG in `dir`, ordered by frame number.
pub fn load_sequence(dir: &Path) -> Result<VideoSequence> {
    if !dir.is_dir() {
        return Err(Error::io(
            dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "not a directory"),
        ));
    }
    let files = numbered_images(dir)?;
    if files.is_empty() {
        return Err(Error::NoFrames(dir.to_path_buf()));
    }
    let mut frames = Vec::with_capacity(files.len());
    for (_, path) in &files {
        let frame = load_frame(path)?;
        if let Some(first) = frames.first() {
            let first: &Frame = first;
            if !frame.same_shape(first) {
                return Err(Error::InconsistentFrame {
                    path: path.clone(),
                    expected: first.shape(),
                    found: frame.shape(),
                });
            }
        }
        frames.push(frame);
    }
    VideoSequence::new(frames, DEFAULT_FPS)
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Encodes the frame as PNG and writes it atomically.
pub fn save_frame(frame: &Frame, path: &Path) -> Result<()> {
    let (h, w, c) = frame.shape();
    let (w32, h32) = (w as u32, h as u32);
    let image = match c {
        1 => {
            let raw: Vec<u8> = frame.data().iter().map(|&v| to_u8(v)).collect();
            DynamicImage::ImageLuma8(ImageBuffer::<Luma<u8>, _>::from_raw(w32, h32, raw).expect("buffer length matches"))
        }
        _ => {
            let mut raw = Vec::with_capacity(h * w * 3);
            for p in frame.data().chunks_exact(c) {
                for k in 0..3 {
                    raw.push(to_u8(p[k.min(c - 1)]));
                }
            }
            DynamicImage::ImageRgb8(ImageBuffer::<Rgb<u8>, _>::from_raw(w32, h32, raw).expect("buffer length matches"))
        }
    };
    let mut png = Vec::new();
    image
        .write_to(&mut std::io::Cursor::new(&mut png), image::ImageFormat::Png)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
    write_atomic(path, |w| w.write_all(&png))
}

pub fn frame_file_name(index: usize) -> String {
    format!("{index:06}.png")
}

/// Writes the frames as `%06d.png` into `dir`, creating it if needed.
/// Returns the number of files written.
pub fn save_sequence(video: &VideoSequence, dir: &Path) -> Result<usize> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, frame) in video.frames().iter().enumerate() {
        save_frame(frame, &dir.join(frame_file_name(i)))?;
    }
    Ok(video.len())
}

/// Writes through a temporary file next to `path` and renames it into
/// place, so readers never see a partial file.
pub fn write_atomic(path: &Path, write: impl FnOnce(&mut dyn Write) -> std::io::Result<()>) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    {
        let mut w = BufWriter::new(tmp.as_file());
        write(&mut w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))?;
    }
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn textured(h: usize, w: usize, seed: usize) -> Frame {
        Frame::from_fn(h, w, 3, |y, x, c| {
            (((x * 7 + y * 13 + c * 5 + seed * 3) % 29) as f32) / 28.0
        })
        .unwrap()
    }

    #[test]
    fn round_trip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let frames: Vec<Frame> = (0..10)
            .map(|i| textured(20, 24, i).map(|v| v * 0.97 + 0.011))
            .collect();
        let video = VideoSequence::new(frames, 30.0).unwrap();
        assert_eq!(save_sequence(&video, dir.path()).unwrap(), 10);
        let back = load_sequence(dir.path()).unwrap();
        assert_eq!(back.len(), 10);
        for (a, b) in video.frames().iter().zip(back.frames()) {
            assert!(a.max_abs_diff(b) <= 0.5 / 255.0 + 1e-6);
        }
    }

    #[test]
    fn zeros_are_exact_and_single_frame_works() {
        let dir = tempfile::tempdir().unwrap();
        let video = VideoSequence::new(vec![Frame::zeros(16, 16, 3).unwrap()], 30.0).unwrap();
        assert_eq!(save_sequence(&video, dir.path()).unwrap(), 1);
        let back = load_sequence(dir.path()).unwrap();
        assert!(back.frames()[0].data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn numeric_order_across_padding_widths() {
        let dir = tempfile::tempdir().unwrap();
        for (i, name) in ["2.png", "010.png", "0001.png", "3.png"].iter().enumerate() {
            let f = Frame::from_fn(16, 16, 1, |_, _, _| i as f32 / 10.0).unwrap();
            save_frame(&f, &dir.path().join(name)).unwrap();
        }
        std::fs::write(dir.path().join("notes.txt"), "ignored").unwrap();
        let video = load_sequence(dir.path()).unwrap();
        let order: Vec<f32> = video
            .frames()
            .iter()
            .map(|f| (f.get(0, 0, 0) * 10.0).round())
            .collect();
        // 0001 (i=2), 2 (i=0), 3 (i=3), 010 (i=1)
        assert_eq!(order, vec![2.0, 0.0, 3.0, 1.0]);
    }

    #[test]
    fn error_cases() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_sequence(dir.path()), Err(Error::NoFrames(_))));
        assert!(load_sequence(&dir.path().join("missing")).is_err());

        save_frame(&textured(16, 16, 0), &dir.path().join("000.png")).unwrap();
        save_frame(&textured(32, 32, 0), &dir.path().join("001.png")).unwrap();
        match load_sequence(dir.path()) {
            Err(Error::InconsistentFrame { path, .. }) => {
                assert!(path.ends_with("001.png"))
            }
            other => panic!("expected inconsistent frame error, got {other:?}"),
        }

        std::fs::write(dir.path().join("002.png"), b"not a png").unwrap();
        std::fs::remove_file(dir.path().join("001.png")).unwrap();
        let err = load_sequence(dir.path()).unwrap_err();
        assert!(err.to_string().contains("002.png"), "{err}");
    }
}
