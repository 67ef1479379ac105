use super::{CellAnnotation, CellClass, Density, Group, Mask, PatchLabel, CELL_RATIO_THRESHOLD, HIGH_TIL_COUNT, PATCH_SIZE};

pub fn label_from_stats(cell_area_ratio: f64, til_count: u32) -> PatchLabel {
    let group = if cell_area_ratio > CELL_RATIO_THRESHOLD { Group::Cells } else { Group::Background };
    let density = match group {
        Group::Background => Density::NotApplicable,
        Group::Cells if til_count >= HIGH_TIL_COUNT => Density::High,
        Group::Cells => Density::Low,
    };
    PatchLabel { group, cell_area_ratio, til_count, density }
}

/// Union of all annotated cells restricted to the patch at `grid_position`,
/// in patch coordinates, and the number of TIL instances that touch it.
pub fn patch_cell_mask(grid_position: (u32, u32), annotations: &[CellAnnotation]) -> (Mask, u32) {
    let (px0, py0) = (grid_position.1 * PATCH_SIZE, grid_position.0 * PATCH_SIZE);
    let mut mask = Mask::new(PATCH_SIZE, PATCH_SIZE);
    let mut tils = 0;
    for a in annotations {
        let (ax, ay) = a.origin;
        let x_lo = ax.max(px0);
        let x_hi = (ax + a.mask.width()).min(px0 + PATCH_SIZE);
        let y_lo = ay.max(py0);
        let y_hi = (ay + a.mask.height()).min(py0 + PATCH_SIZE);
        let mut touched = false;
        for y in y_lo..y_hi {
            for x in x_lo..x_hi {
                if a.mask.get(x - ax, y - ay) {
                    mask.set(x - px0, y - py0, true);
                    touched = true;
                }
            }
        }
        if touched && a.cell_class == CellClass::Til {
            tils += 1;
        }
    }
    (mask, tils)
}

/// Labels the patch at `grid_position` from tile-level annotations.
pub fn label_patch(grid_position: (u32, u32), annotations: &[CellAnnotation]) -> PatchLabel {
    let (mask, tils) = patch_cell_mask(grid_position, annotations);
    let ratio = mask.area() as f64 / (PATCH_SIZE * PATCH_SIZE) as f64;
    label_from_stats(ratio, tils)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn block(origin: (u32, u32), w: u32, h: u32, class: CellClass, id: u32) -> CellAnnotation {
        CellAnnotation::new(origin, Mask::filled(w, h), class, id).unwrap()
    }

    #[test]
    fn ratio_threshold_is_strict() {
        assert_eq!(label_from_stats(0.10, 9).group, Group::Background);
        assert_eq!(label_from_stats(0.10, 9).density, Density::NotApplicable);
        assert_eq!(label_from_stats(0.12, 9).group, Group::Cells);
    }

    #[test]
    fn til_threshold_is_inclusive() {
        assert_eq!(label_from_stats(0.2, 5).density, Density::High);
        assert_eq!(label_from_stats(0.2, 4).density, Density::Low);
    }

    #[test]
    fn counts_and_area_come_from_the_patch_footprint() {
        // 12% coverage from one large OTHER region, 5 small TILs inside.
        let mut anns = vec![block((0, 0), 128, 15, CellClass::Other, 1)];
        anns.push(block((10, 20), 4, 4, CellClass::Til, 2));
        anns.push(block((20, 20), 4, 4, CellClass::Til, 3));
        anns.push(block((30, 20), 4, 4, CellClass::Til, 4));
        anns.push(block((40, 20), 4, 4, CellClass::Til, 5));
        anns.push(block((50, 20), 4, 4, CellClass::Til, 6));
        // Belongs entirely to the neighbouring patch.
        anns.push(block((200, 20), 4, 4, CellClass::Til, 7));
        let label = label_patch((0, 0), &anns);
        let expected = (128.0 * 15.0 + 5.0 * 16.0) / 16384.0;
        assert!((label.cell_area_ratio - expected).abs() < 1e-12);
        assert_eq!(label.til_count, 5);
        assert_eq!(label.density, Density::High);
        let right = label_patch((0, 1), &anns);
        assert_eq!(right.til_count, 1);
        assert_eq!(right.group, Group::Background);
    }

    #[test]
    fn overlapping_cells_count_area_once() {
        let anns = vec![block((0, 0), 64, 64, CellClass::Other, 1), block((0, 0), 64, 64, CellClass::Other, 2)];
        let label = label_patch((0, 0), &anns);
        assert!((label.cell_area_ratio - 0.25).abs() < 1e-12);
    }

    #[test]
    fn straddling_instance_counts_in_both_patches() {
        let anns = vec![block((120, 10), 16, 4, CellClass::Til, 1)];
        assert_eq!(label_patch((0, 0), &anns).til_count, 1);
        assert_eq!(label_patch((0, 1), &anns).til_count, 1);
        let (m, _) = patch_cell_mask((0, 1), &anns);
        assert_eq!(m.area(), 8 * 4);
    }
}
