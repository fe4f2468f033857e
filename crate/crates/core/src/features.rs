//! Convolutional feature head and the window/word decomposition of its
//! feature maps.

use std::sync::Arc;

use rand::Rng;

use crate::autograd::{Graph, Var, PAD};
use crate::error::{Result, UmtlError};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Mat;

/// Same-padded 2-D convolution stored as a (k·k·cin)×cout matrix.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub kernel: usize,
    pub cin: usize,
    pub cout: usize,
    im2col: Arc<[usize]>,
}

impl Conv2d {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        size: usize,
        kernel: usize,
        cin: usize,
        cout: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = kernel * kernel * cin;
        let bound = 1.0 / (fan_in as f64).sqrt();
        Conv2d {
            w: store.add(format!("{name}.w"), Mat::uniform(fan_in, cout, bound, rng)),
            b: store.add(format!("{name}.b"), Mat::zeros(1, cout)),
            kernel,
            cin,
            cout,
            im2col: im2col_index(size, kernel, cin),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let rows = g.value(x).rows;
        let cols = g.gather(x, self.im2col.clone(), rows, self.kernel * self.kernel * self.cin);
        let w = g.param(self.w);
        let b = g.param(self.b);
        let h = g.matmul(cols, w);
        g.add_row(h, b)
    }
}

/// Gather map turning an (m·m)×cin map into its (m·m)×(k·k·cin) patch matrix
/// with zero padding.
pub fn im2col_index(size: usize, kernel: usize, cin: usize) -> Arc<[usize]> {
    let pad = kernel / 2;
    let mut idx = Vec::with_capacity(size * size * kernel * kernel * cin);
    for y in 0..size {
        for x in 0..size {
            for dy in 0..kernel {
                for dx in 0..kernel {
                    let sy = (y + dy) as isize - pad as isize;
                    let sx = (x + dx) as isize - pad as isize;
                    let inside = sy >= 0 && sx >= 0 && (sy as usize) < size && (sx as usize) < size;
                    for ci in 0..cin {
                        idx.push(if inside {
                            ((sy as usize) * size + sx as usize) * cin + ci
                        } else {
                            PAD
                        });
                    }
                }
            }
        }
    }
    idx.into()
}

/// Stem 3×3 conv (3→c) + two residual blocks of 5×5 convs (c→c).
///
/// Block: `relu(x + conv₂(relu(conv₁ x)))`. Spatial size is preserved.
#[derive(Clone, Debug)]
pub struct FeatureHead {
    pub stem: Conv2d,
    pub blocks: Vec<(Conv2d, Conv2d)>,
    pub size: usize,
    pub channels: usize,
}

impl FeatureHead {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, size: usize, channels: usize, rng: &mut R) -> Self {
        let stem = Conv2d::new(store, "head.stem", size, 3, 3, channels, rng);
        let blocks = (0..2)
            .map(|i| {
                (
                    Conv2d::new(store, &format!("head.block{i}.conv1"), size, 5, channels, channels, rng),
                    Conv2d::new(store, &format!("head.block{i}.conv2"), size, 5, channels, channels, rng),
                )
            })
            .collect();
        FeatureHead {
            stem,
            blocks,
            size,
            channels,
        }
    }

    pub fn forward(&self, g: &mut Graph, pixels: Var) -> Var {
        let h = self.stem.forward(g, pixels);
        let mut h = g.relu(h);
        for (c1, c2) in &self.blocks {
            let t = c1.forward(g, h);
            let t = g.relu(t);
            let t = c2.forward(g, t);
            let s = g.add(t, h);
            h = g.relu(s);
        }
        h
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.stem.w, self.stem.b];
        for (a, b) in &self.blocks {
            ids.extend([a.w, a.b, b.w, b.b]);
        }
        ids
    }
}

/// f = F_h(p): an (m·m)×c feature map for one patch.
pub fn extract_features(pixels: &Mat, head: &FeatureHead, store: &ParamStore) -> Result<Mat> {
    let m = head.size;
    if pixels.rows != m * m || pixels.cols != 3 {
        return Err(UmtlError::Shape(format!(
            "patch is {}x{}, head expects {}x3",
            pixels.rows,
            pixels.cols,
            m * m
        )));
    }
    let mut g = Graph::new(store);
    let x = g.input(pixels.clone());
    let f = head.forward(&mut g, x);
    Ok(g.value(f).clone())
}

/// Index map from an (m·m)×c feature map to n_k×(a·a·c) window tokens.
/// Windows run row-major over the window grid; inside a window the token is
/// flattened as (row, col, channel).
pub fn window_index(size: usize, window: usize, channels: usize) -> Arc<[usize]> {
    let per_side = size / window;
    let mut idx = Vec::with_capacity(size * size * channels);
    for wy in 0..per_side {
        for wx in 0..per_side {
            for dy in 0..window {
                for dx in 0..window {
                    let src = (wy * window + dy) * size + wx * window + dx;
                    for c in 0..channels {
                        idx.push(src * channels + c);
                    }
                }
            }
        }
    }
    idx.into()
}

#[derive(Clone, Debug, PartialEq)]
pub struct WindowSequence {
    /// w: n_k×(a·a·c)
    pub windows: Mat,
    /// u: n_k×(a·a·c)
    pub encodings: Mat,
    /// g = u + w
    pub words: Mat,
    pub window: usize,
    pub size: usize,
    pub channels: usize,
}

impl WindowSequence {
    pub fn len(&self) -> usize {
        self.windows.rows
    }

    pub fn is_empty(&self) -> bool {
        self.windows.rows == 0
    }

    /// Puts the window tokens back into an (m·m)×c feature map.
    pub fn reassemble(&self) -> Mat {
        reassemble_windows(&self.windows, self.size, self.window, self.channels)
    }
}

pub fn reassemble_windows(tokens: &Mat, size: usize, window: usize, channels: usize) -> Mat {
    let idx = window_index(size, window, channels);
    let mut out = Mat::zeros(size * size, channels);
    for (i, &src) in idx.iter().enumerate() {
        out.data[src] = tokens.data[i];
    }
    out
}

pub fn check_window(size: usize, window: usize) -> Result<()> {
    if window == 0 || !size.is_multiple_of(window) {
        return Err(UmtlError::Shape(format!(
            "window size {window} does not divide patch size {size}"
        )));
    }
    Ok(())
}

pub fn window_and_encode(fmap: &Mat, size: usize, window: usize, encodings: &Mat) -> Result<WindowSequence> {
    check_window(size, window)?;
    if fmap.rows != size * size {
        return Err(UmtlError::Shape("feature map rows must be m*m".into()));
    }
    let c = fmap.cols;
    let n_k = (size / window).pow(2);
    let dim = window * window * c;
    if encodings.rows != n_k || encodings.cols != dim {
        return Err(UmtlError::Shape(format!(
            "encodings must be {n_k}x{dim}, got {}x{}",
            encodings.rows, encodings.cols
        )));
    }
    let idx = window_index(size, window, c);
    let windows = Mat::from_vec(n_k, dim, idx.iter().map(|&i| fmap.data[i]).collect());
    let mut words = windows.clone();
    words.add_assign(encodings);
    Ok(WindowSequence {
        windows,
        encodings: encodings.clone(),
        words,
        window,
        size,
        channels: c,
    })
}

/// Feature head + learnable positional encodings: pixels → words g.
#[derive(Clone, Debug)]
pub struct Embedder {
    pub head: FeatureHead,
    pub positional: ParamId,
    pub window: usize,
    tokens: Arc<[usize]>,
}

impl Embedder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        size: usize,
        window: usize,
        channels: usize,
        rng: &mut R,
    ) -> Result<Self> {
        check_window(size, window)?;
        let head = FeatureHead::new(store, size, channels, rng);
        let n_k = (size / window).pow(2);
        let positional = store.add("embed.positional", Mat::zeros(n_k, window * window * channels));
        Ok(Embedder {
            head,
            positional,
            window,
            tokens: window_index(size, window, channels),
        })
    }

    pub fn num_tokens(&self) -> usize {
        (self.head.size / self.window).pow(2)
    }

    pub fn token_dim(&self) -> usize {
        self.window * self.window * self.head.channels
    }

    /// Returns (feature map, words g).
    pub fn forward(&self, g: &mut Graph, pixels: Var) -> (Var, Var) {
        let f = self.head.forward(g, pixels);
        let w = g.gather(f, self.tokens.clone(), self.num_tokens(), self.token_dim());
        let u = g.param(self.positional);
        (f, g.add(w, u))
    }

    pub fn words(&self, store: &ParamStore, pixels: &Mat) -> Mat {
        let mut g = Graph::new(store);
        let x = g.input(pixels.clone());
        let (_, words) = self.forward(&mut g, x);
        g.value(words).clone()
    }

    /// Global average of the feature map (one c-vector per patch).
    pub fn pooled(&self, store: &ParamStore, pixels: &Mat) -> Vec<f64> {
        let mut g = Graph::new(store);
        let x = g.input(pixels.clone());
        let f = self.head.forward(&mut g, x);
        g.value(f).mean_rows().data
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.head.param_ids();
        ids.push(self.positional);
        ids
    }
}
