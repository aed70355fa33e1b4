//! Single-sample inference written as individual PNGs plus one grid.

use std::path::{Path, PathBuf};

use crossmlp_autograd::{Bound, Graph, Scalar, Tensor};
use crossmlp_core::CrossMlpGan;
use crossmlp_data::image_io::{
    argmax_indices, indices_to_one_hot, palette_color, read_indices, read_rgb, rgb_to_tensor, tensor_to_heatmap,
    tensor_to_rgb, write_gray, write_indices, write_rgb,
};
use image::{GrayImage, RgbImage};

use crate::error::{io_err, Result, TrainError};

pub const GRID_FILE: &str = "grid.png";

/// Written files in grid order.
pub const PANELS: [&str; 8] = [
    "source.png",
    "semantic.png",
    "coarse_image.png",
    "coarse_semantic.png",
    "final_image.png",
    "refined_semantic.png",
    "u_image.png",
    "u_semantic.png",
];

fn colorize(map: &GrayImage) -> RgbImage {
    RgbImage::from_fn(map.width(), map.height(), |x, y| image::Rgb(palette_color(map.get_pixel(x, y)[0])))
}

fn gray_to_rgb(map: &GrayImage) -> RgbImage {
    RgbImage::from_fn(map.width(), map.height(), |x, y| image::Rgb([map.get_pixel(x, y)[0]; 3]))
}

fn first<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    let one = t.narrow(0, 0, 1);
    let shape = one.shape()[1..].to_vec();
    one.reshape(&shape).expect("drop batch axis")
}

/// Inputs must already be `image_size` square; semantic indices must be
/// below the model's class count.
pub fn generate<T: Scalar>(gan: &CrossMlpGan<T>, source: &Path, semantic: &Path, out: &Path) -> Result<Vec<PathBuf>> {
    let size = gan.config.image_size as u32;
    let src_img = read_rgb(source)?;
    let sem_map = read_indices(semantic)?;
    for (path, dims) in [(source, src_img.dimensions()), (semantic, sem_map.dimensions())] {
        if dims != (size, size) {
            return Err(TrainError::Config(format!(
                "{} is {}x{}, the checkpoint expects {size}x{size}",
                path.display(),
                dims.0,
                dims.1
            )));
        }
    }
    let classes = gan.config.semantic_classes;
    let src: Tensor<T> = rgb_to_tensor(&src_img);
    let sem: Tensor<T> = indices_to_one_hot(&sem_map, classes)?;
    let batch = |t: Tensor<T>| {
        let mut shape = vec![1];
        shape.extend_from_slice(t.shape());
        t.reshape(&shape).expect("add batch axis")
    };

    let g = Graph::new();
    let p = Bound::frozen(&g, &gan.gen_params);
    let o = gan.generator.forward(&p, g.constant(batch(src)), g.constant(batch(sem)))?;
    let value = |v: crossmlp_autograd::Var<'_, T>| first(&v.value());

    std::fs::create_dir_all(out).map_err(io_err(out))?;
    let coarse_sem = argmax_indices(&value(o.stage1.coarse_semantic))?;
    let refined_sem = argmax_indices(&value(o.refined_semantic))?;
    let u_image = tensor_to_heatmap(&value(o.selection.u_image))?;
    let u_semantic = tensor_to_heatmap(&value(o.selection.u_semantic))?;
    let panels = [
        src_img.clone(),
        colorize(&sem_map),
        tensor_to_rgb(&value(o.stage1.coarse_image))?,
        colorize(&coarse_sem),
        tensor_to_rgb(&value(o.final_image))?,
        colorize(&refined_sem),
        gray_to_rgb(&u_image),
        gray_to_rgb(&u_semantic),
    ];

    let mut written = Vec::new();
    for (i, name) in PANELS.iter().enumerate() {
        let path = out.join(name);
        match *name {
            "semantic.png" => write_indices(&path, &sem_map)?,
            "coarse_semantic.png" => write_indices(&path, &coarse_sem)?,
            "refined_semantic.png" => write_indices(&path, &refined_sem)?,
            "u_image.png" => write_gray(&path, &u_image)?,
            "u_semantic.png" => write_gray(&path, &u_semantic)?,
            _ => write_rgb(&path, &panels[i])?,
        }
        written.push(path);
    }
    let mut grid = RgbImage::new(size * panels.len() as u32, size);
    for (i, panel) in panels.iter().enumerate() {
        image::imageops::replace(&mut grid, panel, (i as u32 * size) as i64, 0);
    }
    let grid_path = out.join(GRID_FILE);
    write_rgb(&grid_path, &grid)?;
    written.push(grid_path);
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::state::initialize;
    use crate::testing::tiny_config;
    use crossmlp_data::render_toy;

    fn inputs(dir: &Path, size: u32) -> (PathBuf, PathBuf) {
        let raw = render_toy(0, size, 4, 3);
        let (s, m) = (dir.join("in_src.png"), dir.join("in_sem.png"));
        write_rgb(&s, &raw.source).unwrap();
        write_indices(&m, &raw.semantic).unwrap();
        (s, m)
    }

    #[test]
    fn writes_grid_and_panels_deterministically() {
        let dir = tempfile::tempdir().unwrap();
        let (s, m) = inputs(dir.path(), 32);
        let state = initialize::<f32>(&tiny_config()).unwrap();
        let files = generate(&state.gan, &s, &m, &dir.path().join("a")).unwrap();
        assert_eq!(files.len(), PANELS.len() + 1);
        for f in &files {
            assert!(f.is_file(), "{}", f.display());
        }
        let grid = read_rgb(&dir.path().join("a").join(GRID_FILE)).unwrap();
        assert_eq!(grid.dimensions(), (32 * 8, 32));
        assert_eq!(read_rgb(&dir.path().join("a/final_image.png")).unwrap().dimensions(), (32, 32));
        generate(&state.gan, &s, &m, &dir.path().join("b")).unwrap();
        for name in PANELS.iter().chain([&GRID_FILE]) {
            assert_eq!(
                std::fs::read(dir.path().join("a").join(name)).unwrap(),
                std::fs::read(dir.path().join("b").join(name)).unwrap()
            );
        }
    }

    #[test]
    fn size_or_class_mismatch_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let (s, m) = inputs(dir.path(), 64);
        let state = initialize::<f32>(&tiny_config()).unwrap();
        assert!(generate(&state.gan, &s, &m, &dir.path().join("o")).is_err());
        let (s, m) = inputs(dir.path(), 32);
        let mut c = tiny_config();
        c.model.semantic_classes = 3;
        let narrow = initialize::<f32>(&c).unwrap();
        // Toy maps with 4 classes use index 3 somewhere only if a roof is
        // drawn; the toy renderer always draws at least one.
        assert!(generate(&narrow.gan, &s, &m, &dir.path().join("o")).is_err());
    }
}
