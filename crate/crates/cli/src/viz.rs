//! Side-by-side match drawing.

use topicmatch::backbone::ImageTensor;

const HIGH: [f64; 3] = [0.0, 200.0, 0.0];
const LOW: [f64; 3] = [255.0, 165.0, 0.0];

pub struct Canvas {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<u8>,
}

impl Canvas {
    pub fn side_by_side(a: &ImageTensor, b: &ImageTensor) -> Self {
        let width = a.width + b.width;
        let height = a.height.max(b.height);
        let mut rgb = vec![0u8; width * height * 3];
        for (img, x0) in [(a, 0), (b, a.width)] {
            for y in 0..img.height {
                for x in 0..img.width {
                    let g = (img.at(x, y).clamp(0.0, 1.0) * 255.0).round() as u8;
                    let o = (y * width + x0 + x) * 3;
                    rgb[o..o + 3].copy_from_slice(&[g, g, g]);
                }
            }
        }
        Self { width, height, rgb }
    }

    fn put(&mut self, x: i64, y: i64, c: [u8; 3]) {
        if x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height {
            let o = (y as usize * self.width + x as usize) * 3;
            self.rgb[o..o + 3].copy_from_slice(&c);
        }
    }

    /// Bresenham segment.
    pub fn line(&mut self, p: [f64; 2], q: [f64; 2], c: [u8; 3]) {
        let (mut x0, mut y0) = (p[0].round() as i64, p[1].round() as i64);
        let (x1, y1) = (q[0].round() as i64, q[1].round() as i64);
        let dx = (x1 - x0).abs();
        let dy = -(y1 - y0).abs();
        let sx = if x0 < x1 { 1 } else { -1 };
        let sy = if y0 < y1 { 1 } else { -1 };
        let mut err = dx + dy;
        loop {
            self.put(x0, y0, c);
            if x0 == x1 && y0 == y1 {
                break;
            }
            let e2 = 2 * err;
            if e2 >= dy {
                err += dy;
                x0 += sx;
            }
            if e2 <= dx {
                err += dx;
                y0 += sy;
            }
        }
    }
}

/// Orange at confidence 0 through green at confidence 1.
pub fn confidence_color(conf: f64) -> [u8; 3] {
    let t = conf.clamp(0.0, 1.0);
    [0, 1, 2].map(|k| (LOW[k] + t * (HIGH[k] - LOW[k])).round() as u8)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn color_endpoints() {
        assert_eq!(confidence_color(1.0), [0, 200, 0]);
        assert_eq!(confidence_color(0.0), [255, 165, 0]);
    }

    #[test]
    fn line_covers_both_ends() {
        let img = ImageTensor::new(vec![0.0; 64], 8, 8).unwrap();
        let mut c = Canvas::side_by_side(&img, &img);
        c.line([0.0, 0.0], [15.0, 7.0], [9, 9, 9]);
        assert_eq!(&c.rgb[0..3], &[9, 9, 9]);
        let o = (7 * 16 + 15) * 3;
        assert_eq!(&c.rgb[o..o + 3], &[9, 9, 9]);
    }
}
