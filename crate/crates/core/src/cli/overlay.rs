//! Annotated result images: boxes, class labels with scores, and the
//! caption in a band under the picture.

use crate::detect::Detection;
use crate::scenegen::ImageTensor;

/// Overlays are upscaled until at least this wide so labels stay legible.
pub const MIN_OVERLAY_WIDTH: usize = 512;

const GLYPH_W: usize = 5;
const GLYPH_H: usize = 7;
const TEXT_SCALE: usize = 2;
const ADVANCE: usize = (GLYPH_W + 1) * TEXT_SCALE;
const LINE_HEIGHT: usize = (GLYPH_H + 3) * TEXT_SCALE;
const PAD: usize = 6;

const WHITE: [f32; 3] = [1.0, 1.0, 1.0];
const BLACK: [f32; 3] = [0.0, 0.0, 0.0];

const PALETTE: [[f32; 3]; 8] = [
    [1.0, 0.2, 0.2],
    [0.2, 0.9, 0.2],
    [0.25, 0.45, 1.0],
    [1.0, 0.85, 0.1],
    [1.0, 0.3, 1.0],
    [0.1, 0.95, 0.95],
    [1.0, 0.55, 0.1],
    [0.6, 0.35, 1.0],
];

pub fn class_color(class_id: usize) -> [f32; 3] {
    PALETTE[class_id % PALETTE.len()]
}

/// Rows of a 5×7 glyph, most significant of the low five bits leftmost.
/// Lowercase letters share the uppercase shapes; anything unknown is `?`.
fn glyph(c: char) -> [u8; GLYPH_H] {
    match c.to_ascii_uppercase() {
        'A' => [0x0E, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11],
        'B' => [0x1E, 0x11, 0x11, 0x1E, 0x11, 0x11, 0x1E],
        'C' => [0x0E, 0x11, 0x10, 0x10, 0x10, 0x11, 0x0E],
        'D' => [0x1E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x1E],
        'E' => [0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x1F],
        'F' => [0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x10],
        'G' => [0x0E, 0x11, 0x10, 0x17, 0x11, 0x11, 0x0F],
        'H' => [0x11, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11],
        'I' => [0x0E, 0x04, 0x04, 0x04, 0x04, 0x04, 0x0E],
        'J' => [0x07, 0x02, 0x02, 0x02, 0x02, 0x12, 0x0C],
        'K' => [0x11, 0x12, 0x14, 0x18, 0x14, 0x12, 0x11],
        'L' => [0x10, 0x10, 0x10, 0x10, 0x10, 0x10, 0x1F],
        'M' => [0x11, 0x1B, 0x15, 0x15, 0x11, 0x11, 0x11],
        'N' => [0x11, 0x11, 0x19, 0x15, 0x13, 0x11, 0x11],
        'O' => [0x0E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E],
        'P' => [0x1E, 0x11, 0x11, 0x1E, 0x10, 0x10, 0x10],
        'Q' => [0x0E, 0x11, 0x11, 0x11, 0x15, 0x12, 0x0D],
        'R' => [0x1E, 0x11, 0x11, 0x1E, 0x14, 0x12, 0x11],
        'S' => [0x0F, 0x10, 0x10, 0x0E, 0x01, 0x01, 0x1E],
        'T' => [0x1F, 0x04, 0x04, 0x04, 0x04, 0x04, 0x04],
        'U' => [0x11, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E],
        'V' => [0x11, 0x11, 0x11, 0x11, 0x11, 0x0A, 0x04],
        'W' => [0x11, 0x11, 0x11, 0x15, 0x15, 0x15, 0x0A],
        'X' => [0x11, 0x11, 0x0A, 0x04, 0x0A, 0x11, 0x11],
        'Y' => [0x11, 0x11, 0x11, 0x0A, 0x04, 0x04, 0x04],
        'Z' => [0x1F, 0x01, 0x02, 0x04, 0x08, 0x10, 0x1F],
        '0' => [0x0E, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0E],
        '1' => [0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E],
        '2' => [0x0E, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1F],
        '3' => [0x1F, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0E],
        '4' => [0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02],
        '5' => [0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E],
        '6' => [0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E],
        '7' => [0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08],
        '8' => [0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E],
        '9' => [0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x0C],
        '.' => [0x00, 0x00, 0x00, 0x00, 0x00, 0x0C, 0x0C],
        '-' => [0x00, 0x00, 0x00, 0x1F, 0x00, 0x00, 0x00],
        ':' => [0x00, 0x0C, 0x0C, 0x00, 0x0C, 0x0C, 0x00],
        '<' => [0x02, 0x04, 0x08, 0x10, 0x08, 0x04, 0x02],
        '>' => [0x08, 0x04, 0x02, 0x01, 0x02, 0x04, 0x08],
        '_' => [0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x1F],
        ' ' => [0; GLYPH_H],
        _ => [0x0E, 0x11, 0x01, 0x02, 0x04, 0x00, 0x04],
    }
}

fn put(img: &mut ImageTensor, x: isize, y: isize, rgb: [f32; 3]) {
    if x >= 0 && y >= 0 && (x as usize) < img.width && (y as usize) < img.height {
        img.set_pixel(x as usize, y as usize, rgb);
    }
}

fn fill_rect(img: &mut ImageTensor, x0: isize, y0: isize, w: usize, h: usize, rgb: [f32; 3]) {
    for y in y0..y0 + h as isize {
        for x in x0..x0 + w as isize {
            put(img, x, y, rgb);
        }
    }
}

/// One-pixel rectangle outline; parts outside the canvas are skipped.
pub fn draw_box(img: &mut ImageTensor, x0: isize, y0: isize, x1: isize, y1: isize, rgb: [f32; 3]) {
    for x in x0..=x1 {
        put(img, x, y0, rgb);
        put(img, x, y1, rgb);
    }
    for y in y0..=y1 {
        put(img, x0, y, rgb);
        put(img, x1, y, rgb);
    }
}

pub fn text_width(text: &str) -> usize {
    text.chars().count() * ADVANCE
}

/// Draws `text` with its top-left corner at `(x, y)`.
pub fn draw_text(img: &mut ImageTensor, x: isize, y: isize, text: &str, rgb: [f32; 3]) {
    for (i, c) in text.chars().enumerate() {
        let gx = x + (i * ADVANCE) as isize;
        for (row, bits) in glyph(c).iter().enumerate() {
            for col in 0..GLYPH_W {
                if bits >> (GLYPH_W - 1 - col) & 1 == 1 {
                    let px = gx + (col * TEXT_SCALE) as isize;
                    let py = y + (row * TEXT_SCALE) as isize;
                    fill_rect(img, px, py, TEXT_SCALE, TEXT_SCALE, rgb);
                }
            }
        }
    }
}

/// Greedy word wrap to at most `max_chars` per line (long words are split).
pub fn wrap(text: &str, max_chars: usize) -> Vec<String> {
    let max_chars = max_chars.max(1);
    let mut lines = Vec::new();
    let mut line = String::new();
    for word in text.split_whitespace() {
        let mut word: Vec<char> = word.chars().collect();
        while word.len() > max_chars {
            if !line.is_empty() {
                lines.push(std::mem::take(&mut line));
            }
            lines.push(word.drain(..max_chars).collect());
        }
        let word: String = word.into_iter().collect();
        let needed = if line.is_empty() { word.len() } else { line.len() + 1 + word.len() };
        if needed > max_chars && !line.is_empty() {
            lines.push(std::mem::take(&mut line));
        }
        if !line.is_empty() {
            line.push(' ');
        }
        line.push_str(&word);
    }
    if !line.is_empty() || lines.is_empty() {
        lines.push(line);
    }
    lines
}

fn upscale(img: &ImageTensor, factor: usize) -> ImageTensor {
    let mut out = ImageTensor::filled(img.height * factor, img.width * factor, BLACK);
    for y in 0..out.height {
        for x in 0..out.width {
            out.set_pixel(x, y, img.pixel(x / factor, y / factor));
        }
    }
    out
}

/// Builds the annotated picture: the input upscaled by an integer factor to
/// at least [`MIN_OVERLAY_WIDTH`] pixels wide, a box and a "name score" tag
/// per detection, and the caption wrapped into a black band underneath.
pub fn render(
    image: &ImageTensor,
    detections: &[Detection],
    caption: &str,
    class_name: impl Fn(usize) -> String,
) -> ImageTensor {
    let factor = MIN_OVERLAY_WIDTH.div_ceil(image.width.max(1)).max(1);
    let scaled = upscale(image, factor);
    let width = scaled.width;
    let lines = wrap(&caption.to_uppercase(), (width - 2 * PAD) / ADVANCE);
    let band = 2 * PAD + lines.len() * LINE_HEIGHT;

    let mut canvas = ImageTensor::filled(scaled.height + band, width, BLACK);
    canvas.data[..scaled.data.len()].copy_from_slice(&scaled.data);

    let f = factor as f64;
    for det in detections {
        let rgb = class_color(det.class_id);
        let b = &det.bbox;
        let (x0, y0) = ((b.x_min * f).round() as isize, (b.y_min * f).round() as isize);
        let (x1, y1) = ((b.x_max * f).round() as isize - 1, (b.y_max * f).round() as isize - 1);
        draw_box(&mut canvas, x0, y0, x1.max(x0), y1.max(y0), rgb);

        let label = format!("{} {:.2}", class_name(det.class_id), det.score).to_uppercase();
        let tag_w = text_width(&label) + TEXT_SCALE;
        let tag_h = GLYPH_H * TEXT_SCALE + 2 * TEXT_SCALE;
        // above the box when there is room, otherwise just inside it
        let ty = if y0 >= tag_h as isize { y0 - tag_h as isize } else { y0 + 1 };
        let tx = x0.clamp(0, (width.saturating_sub(tag_w)) as isize);
        fill_rect(&mut canvas, tx, ty, tag_w, tag_h, rgb);
        draw_text(&mut canvas, tx + TEXT_SCALE as isize, ty + TEXT_SCALE as isize, &label, BLACK);
    }

    for (i, line) in lines.iter().enumerate() {
        let y = scaled.height + PAD + i * LINE_HEIGHT;
        draw_text(&mut canvas, PAD as isize, y as isize, line, WHITE);
    }
    canvas
}
