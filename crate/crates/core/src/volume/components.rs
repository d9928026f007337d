use super::Grid2;

/// Pixel adjacency used when growing components.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Connectivity {
    /// N, S, E, W neighbours.
    Four,
    /// All eight neighbours.
    Eight,
}

impl Connectivity {
    pub fn from_count(n: u32) -> Option<Self> {
        match n {
            4 => Some(Connectivity::Four),
            8 => Some(Connectivity::Eight),
            _ => None,
        }
    }
}

/// Result of [`connected_components`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Components {
    /// 0 for background pixels, component id (1-based) otherwise.
    pub labels: Grid2<u32>,
    /// `sizes[id]` is the pixel count of component `id`; `sizes[0]` is always 0.
    pub sizes: Vec<usize>,
}

impl Components {
    pub fn count(&self) -> usize {
        self.sizes.len() - 1
    }

    pub fn largest(&self) -> usize {
        self.sizes.iter().copied().max().unwrap_or(0)
    }
}

/// Labels the nonzero pixels of `grid`. Ids are dense from 1 and assigned in
/// raster order of each component's first pixel.
pub fn connected_components(grid: &Grid2<u8>, connectivity: Connectivity) -> Components {
    let (rows, cols) = (grid.rows(), grid.cols());
    let mut provisional = vec![0u32; rows * cols];
    let mut parent: Vec<u32> = vec![0];

    for r in 0..rows {
        for c in 0..cols {
            if *grid.get(r, c) == 0 {
                continue;
            }
            let mut neighbours = [0u32; 4];
            let mut n = 0;
            let mut push = |rr: usize, cc: usize| {
                let l = provisional[rr * cols + cc];
                if l != 0 {
                    neighbours[n] = l;
                    n += 1;
                }
            };
            if c > 0 {
                push(r, c - 1);
            }
            if r > 0 {
                push(r - 1, c);
                if connectivity == Connectivity::Eight {
                    if c > 0 {
                        push(r - 1, c - 1);
                    }
                    if c + 1 < cols {
                        push(r - 1, c + 1);
                    }
                }
            }
            let label = if n == 0 {
                let l = parent.len() as u32;
                parent.push(l);
                l
            } else {
                let root = neighbours[..n].iter().map(|&l| find(&mut parent, l)).min().unwrap();
                for &l in &neighbours[..n] {
                    let other = find(&mut parent, l);
                    parent[other as usize] = root;
                }
                root
            };
            provisional[r * cols + c] = label;
        }
    }

    let mut remap = vec![0u32; parent.len()];
    let mut sizes = vec![0usize];
    let labels = provisional
        .iter()
        .map(|&l| {
            if l == 0 {
                return 0;
            }
            let root = find(&mut parent, l) as usize;
            if remap[root] == 0 {
                sizes.push(0);
                remap[root] = (sizes.len() - 1) as u32;
            }
            let id = remap[root];
            sizes[id as usize] += 1;
            id
        })
        .collect();
    Components { labels: Grid2::from_vec(rows, cols, labels), sizes }
}

fn find(parent: &mut [u32], mut x: u32) -> u32 {
    while parent[x as usize] != x {
        let grand = parent[parent[x as usize] as usize];
        parent[x as usize] = grand;
        x = grand;
    }
    x
}
