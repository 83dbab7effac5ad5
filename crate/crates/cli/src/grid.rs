use inade::{Error, Result, Tensor};

/// Tiles 3×H×W images row-major into `cols` columns separated by `pad`
/// pixels of white. Images of different sizes are rejected.
pub fn contact_sheet(images: &[Tensor], cols: usize, pad: usize) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| Error::config("no images to tile"))?;
    if cols == 0 {
        return Err(Error::config("cols must be positive"));
    }
    let (_, h, w) = first.dims3();
    if images.iter().any(|i| i.shape() != first.shape()) {
        return Err(Error::shape("contact sheet images must share one size"));
    }
    let cols = cols.min(images.len());
    let rows = images.len().div_ceil(cols);
    let (sh, sw) = (rows * h + (rows + 1) * pad, cols * w + (cols + 1) * pad);
    let mut sheet = Tensor::full(&[3, sh, sw], 1.0);
    let data = sheet.data_mut();
    for (k, img) in images.iter().enumerate() {
        let (oy, ox) = (pad + (k / cols) * (h + pad), pad + (k % cols) * (w + pad));
        for c in 0..3 {
            for y in 0..h {
                let src = &img.data()[c * h * w + y * w..c * h * w + (y + 1) * w];
                let at = c * sh * sw + (oy + y) * sw + ox;
                data[at..at + w].copy_from_slice(src);
            }
        }
    }
    Ok(sheet)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout() {
        let imgs: Vec<Tensor> = (0..3).map(|i| Tensor::full(&[3, 2, 2], -(i as f64) / 4.0)).collect();
        let s = contact_sheet(&imgs, 2, 1).unwrap();
        assert_eq!(s.shape(), &[3, 7, 7]);
        let at = |c: usize, y: usize, x: usize| s.data()[c * 49 + y * 7 + x];
        assert_eq!(at(0, 0, 0), 1.0);
        assert_eq!(at(0, 1, 1), 0.0);
        assert_eq!(at(1, 2, 5), -0.25);
        assert_eq!(at(2, 4, 2), -0.5);
        assert_eq!(at(2, 4, 5), 1.0);
        assert!(contact_sheet(&[], 2, 0).is_err());
        assert!(contact_sheet(&[imgs[0].clone(), Tensor::zeros(&[3, 1, 1])], 2, 0).is_err());
    }
}
