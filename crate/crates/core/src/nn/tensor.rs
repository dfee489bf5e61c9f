use ndarray::{Array2, ArrayView2};

/// Dense `(C, N, H, W)` activation buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub channels: usize,
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(channels: usize, batch: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            batch,
            height,
            width,
            data: vec![0.0; channels * batch * height * width],
        }
    }

    /// Stacks equally sized single-channel images into a batch.
    pub fn from_images(images: &[ArrayView2<'_, f32>]) -> Self {
        let (h, w) = images.first().map_or((0, 0), |i| i.dim());
        let mut data = Vec::with_capacity(images.len() * h * w);
        for img in images {
            assert_eq!(img.dim(), (h, w), "batch images must share one size");
            data.extend(img.iter().copied());
        }
        Self {
            channels: 1,
            batch: images.len(),
            height: h,
            width: w,
            data,
        }
    }

    /// Splits a single-channel batch back into images.
    pub fn to_images(&self) -> Vec<Array2<f32>> {
        assert_eq!(self.channels, 1);
        self.data
            .chunks_exact(self.plane())
            .map(|c| Array2::from_shape_vec((self.height, self.width), c.to_vec()).expect("plane size"))
            .collect()
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    /// Elements of one channel across the batch.
    pub fn channel_len(&self) -> usize {
        self.batch * self.plane()
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.channels, self.batch, self.height, self.width]
    }

    /// Concatenates along the channel axis.
    pub fn concat_channels(mut self, other: &Tensor) -> Tensor {
        assert_eq!(
            (self.batch, self.height, self.width),
            (other.batch, other.height, other.width),
            "concatenated tensors must share batch and spatial dims"
        );
        self.data.extend_from_slice(&other.data);
        self.channels += other.channels;
        self
    }

    /// Inverse of [`Tensor::concat_channels`]: first `channels` channels, then the rest.
    pub fn split_channels(mut self, channels: usize) -> (Tensor, Tensor) {
        assert!(channels <= self.channels);
        let tail = self.data.split_off(channels * self.channel_len());
        let rest = Tensor {
            channels: self.channels - channels,
            batch: self.batch,
            height: self.height,
            width: self.width,
            data: tail,
        };
        self.channels = channels;
        (self, rest)
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}
