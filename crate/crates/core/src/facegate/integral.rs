use crate::image::GrayImage;

/// Summed-area tables (plain and squared) of a grayscale image.
///
/// Entry `(x, y)` holds the sum of all pixels strictly above and left of
/// `(x, y)`, so the tables are `(width + 1) × (height + 1)` with a zero first
/// row and column.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IntegralImage {
    width: usize,
    height: usize,
    sum: Vec<u64>,
    sqsum: Vec<u64>,
}

impl IntegralImage {
    pub fn new(img: &GrayImage) -> Self {
        let (w, h) = (img.width(), img.height());
        let stride = w + 1;
        let mut sum = vec![0u64; stride * (h + 1)];
        let mut sqsum = vec![0u64; stride * (h + 1)];
        for y in 0..h {
            let mut row = 0u64;
            let mut row_sq = 0u64;
            for x in 0..w {
                let v = img.get(x, y) as u64;
                row += v;
                row_sq += v * v;
                let i = (y + 1) * stride + x + 1;
                sum[i] = sum[i - stride] + row;
                sqsum[i] = sqsum[i - stride] + row_sq;
            }
        }
        Self {
            width: w,
            height: h,
            sum,
            sqsum,
        }
    }

    /// Image width (the table is one wider).
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> u64 {
        self.sum[y * (self.width + 1) + x]
    }

    #[inline]
    pub fn sq_at(&self, x: usize, y: usize) -> u64 {
        self.sqsum[y * (self.width + 1) + x]
    }

    /// Sum of pixels in `[x, x+w) × [y, y+h)`.
    #[inline]
    pub fn rect_sum(&self, x: usize, y: usize, w: usize, h: usize) -> u64 {
        Self::query(&self.sum, self.width + 1, x, y, w, h)
    }

    /// Sum of squared pixels in `[x, x+w) × [y, y+h)`.
    #[inline]
    pub fn rect_sq_sum(&self, x: usize, y: usize, w: usize, h: usize) -> u64 {
        Self::query(&self.sqsum, self.width + 1, x, y, w, h)
    }

    #[inline]
    fn query(t: &[u64], stride: usize, x: usize, y: usize, w: usize, h: usize) -> u64 {
        let (x1, y1) = (x + w, y + h);
        // add before subtracting; every partial result stays non-negative
        t[y1 * stride + x1] + t[y * stride + x] - t[y * stride + x1] - t[y1 * stride + x]
    }
}

pub fn compute_integral(img: &GrayImage) -> IntegralImage {
    IntegralImage::new(img)
}
