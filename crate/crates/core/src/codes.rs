use std::fmt;

/// Quantizer indices, `[frames x stages]`, row-major.
#[derive(Clone, PartialEq, Eq)]
pub struct CodeGrid {
    frames: usize,
    stages: usize,
    indices: Vec<u32>,
}

impl CodeGrid {
    /// Builds a grid from frame-major indices. Returns `None` if the length
    /// does not equal `frames * stages` or `stages` is zero.
    pub fn new(frames: usize, stages: usize, indices: Vec<u32>) -> Option<Self> {
        (stages > 0 && indices.len() == frames * stages).then_some(CodeGrid {
            frames,
            stages,
            indices,
        })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn stages(&self) -> usize {
        self.stages
    }

    pub fn indices(&self) -> &[u32] {
        &self.indices
    }

    pub fn get(&self, frame: usize, stage: usize) -> u32 {
        self.indices[frame * self.stages + stage]
    }

    pub fn frame(&self, frame: usize) -> &[u32] {
        &self.indices[frame * self.stages..(frame + 1) * self.stages]
    }

    /// First `keep` stages of every frame.
    pub fn keep_stages(&self, keep: usize) -> Option<Self> {
        if keep == 0 || keep > self.stages {
            return None;
        }
        let indices = (0..self.frames).flat_map(|f| self.frame(f)[..keep].iter().copied()).collect();
        CodeGrid::new(self.frames, keep, indices)
    }

    pub fn max_index(&self) -> Option<u32> {
        self.indices.iter().copied().max()
    }

    /// Per-stage histogram over `0..codebook_size`.
    pub fn histogram(&self, codebook_size: usize) -> Vec<Vec<usize>> {
        let mut h = vec![vec![0; codebook_size]; self.stages];
        for f in 0..self.frames {
            for (s, &i) in self.frame(f).iter().enumerate() {
                if let Some(c) = h[s].get_mut(i as usize) {
                    *c += 1;
                }
            }
        }
        h
    }
}

impl fmt::Debug for CodeGrid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "CodeGrid[{}x{}]", self.frames, self.stages)?;
        if self.indices.len() <= 32 {
            write!(f, "{:?}", self.indices)?;
        }
        Ok(())
    }
}
