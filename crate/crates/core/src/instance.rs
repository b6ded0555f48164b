//! Score map to independent instances: threshold, connected components,
//! per-component centroid, area and bounding box.

use std::fmt::Write as _;
use std::io::BufRead;
use std::path::Path;

use crate::error::{arg_err, shape_err, Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<bool>,
}

impl BinaryMap {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width {
            return Err(shape_err("binary_map", format!("{} values for {height}x{width}", data.len())));
        }
        Ok(BinaryMap { height, width, data })
    }

    pub fn foreground(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Connectivity {
    Four,
    #[default]
    Eight,
}

impl Connectivity {
    /// Neighbors already visited in a raster scan.
    fn previous(self) -> &'static [(isize, isize)] {
        match self {
            Connectivity::Four => &[(-1, 0), (0, -1)],
            Connectivity::Eight => &[(-1, -1), (-1, 0), (-1, 1), (0, -1)],
        }
    }

    pub fn offsets(self) -> &'static [(isize, isize)] {
        match self {
            Connectivity::Four => &[(-1, 0), (0, -1), (0, 1), (1, 0)],
            Connectivity::Eight => &[(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)],
        }
    }
}

/// Labels `0` (background) and `1..=count`, dense in raster order of each
/// component's first pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstanceMap {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u32>,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub id: u32,
    /// `(x, y)` in pixel coordinates.
    pub centroid: (f64, f64),
    pub area: usize,
    /// `(x0, y0, x1, y1)`, inclusive.
    pub bbox: (usize, usize, usize, usize),
}

/// `score > t` per pixel; `score` is row-major `height x width`.
pub fn binarize(score: &[f32], height: usize, width: usize, t: f32) -> Result<BinaryMap> {
    if !(t > 0.0 && t < 1.0) {
        return Err(arg_err("binarize", format!("threshold {t} outside (0, 1)")));
    }
    BinaryMap::new(height, width, score.iter().map(|&s| s > t).collect())
}

struct UnionFind(Vec<usize>);

impl UnionFind {
    fn find(&mut self, mut i: usize) -> usize {
        while self.0[i] != i {
            self.0[i] = self.0[self.0[i]];
            i = self.0[i];
        }
        i
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        // keep the smaller (earlier) root so roots are first raster pixels
        if ra < rb {
            self.0[rb] = ra;
        } else if rb < ra {
            self.0[ra] = rb;
        }
    }
}

pub fn connected_components(bin: &BinaryMap, conn: Connectivity) -> InstanceMap {
    let (h, w) = (bin.height, bin.width);
    let mut uf = UnionFind((0..h * w).collect());
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if !bin.data[i] {
                continue;
            }
            for &(dy, dx) in conn.previous() {
                let (ny, nx) = (y as isize + dy, x as isize + dx);
                if ny < 0 || nx < 0 || nx >= w as isize {
                    continue;
                }
                let j = ny as usize * w + nx as usize;
                if bin.data[j] {
                    uf.union(i, j);
                }
            }
        }
    }
    let mut root_label = vec![0u32; h * w];
    let mut labels = vec![0u32; h * w];
    let mut count = 0u32;
    for i in 0..h * w {
        if !bin.data[i] {
            continue;
        }
        let r = uf.find(i);
        if root_label[r] == 0 {
            count += 1;
            root_label[r] = count;
        }
        labels[i] = root_label[r];
    }
    InstanceMap {
        height: h,
        width: w,
        labels,
        count: count as usize,
    }
}

/// One instance per label, sorted by id; components smaller than
/// `min_area` are dropped.
pub fn extract_instances(map: &InstanceMap, min_area: usize) -> Vec<Instance> {
    let mut acc: Vec<(f64, f64, usize, (usize, usize, usize, usize))> =
        vec![(0.0, 0.0, 0, (usize::MAX, usize::MAX, 0, 0)); map.count];
    for y in 0..map.height {
        for x in 0..map.width {
            let l = map.labels[y * map.width + x];
            if l == 0 {
                continue;
            }
            let a = &mut acc[l as usize - 1];
            a.0 += x as f64;
            a.1 += y as f64;
            a.2 += 1;
            a.3 = (a.3 .0.min(x), a.3 .1.min(y), a.3 .2.max(x), a.3 .3.max(y));
        }
    }
    acc.into_iter()
        .enumerate()
        .filter(|(_, a)| a.2 >= min_area.max(1))
        .map(|(i, (sx, sy, n, bbox))| Instance {
            id: i as u32 + 1,
            centroid: (sx / n as f64, sy / n as f64),
            area: n,
            bbox,
        })
        .collect()
}

/// Binarize, label and extract in one go.
pub fn localize(score: &[f32], height: usize, width: usize, t: f32, conn: Connectivity) -> Result<Vec<Instance>> {
    let bin = binarize(score, height, width, t)?;
    Ok(extract_instances(&connected_components(&bin, conn), 1))
}

/// `count K threshold t` followed by one `x y area` line per instance.
pub fn format_predictions(instances: &[Instance], threshold: f32) -> String {
    let mut s = format!("count {} threshold {}\n", instances.len(), threshold);
    for inst in instances {
        let _ = writeln!(s, "{:.3} {:.3} {}", inst.centroid.0, inst.centroid.1, inst.area);
    }
    s
}

/// Parses [`format_predictions`] output into `(x, y, area)` triples.
pub fn parse_predictions(text: &str, origin: &Path) -> Result<(f32, Vec<(f64, f64, usize)>)> {
    let perr = |line: usize, msg: String| Error::Parse {
        path: origin.to_path_buf(),
        line,
        msg,
    };
    let mut lines = text.as_bytes().lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| perr(1, "missing header".into()))?;
    let header = header?;
    let parts: Vec<&str> = header.split_whitespace().collect();
    let (count, threshold) = match parts.as_slice() {
        ["count", k, "threshold", t] => (
            k.parse::<usize>().map_err(|e| perr(1, e.to_string()))?,
            t.parse::<f32>().map_err(|e| perr(1, e.to_string()))?,
        ),
        _ => return Err(perr(1, format!("bad header {header:?}"))),
    };
    let mut out = Vec::with_capacity(count);
    for (i, line) in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 3 {
            return Err(perr(i + 1, format!("expected `x y area`, got {line:?}")));
        }
        let x = f[0].parse::<f64>().map_err(|e| perr(i + 1, e.to_string()))?;
        let y = f[1].parse::<f64>().map_err(|e| perr(i + 1, e.to_string()))?;
        let a = f[2].parse::<usize>().map_err(|e| perr(i + 1, e.to_string()))?;
        out.push((x, y, a));
    }
    if out.len() != count {
        return Err(perr(1, format!("header says {count} instances, found {}", out.len())));
    }
    Ok((threshold, out))
}
