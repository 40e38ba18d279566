#!/usr/bin/env python3
"""Rasterizes printable ASCII from DejaVu Sans Mono into src/core/font_glyphs.inc.

Each glyph is 7 columns x 13 rows; one byte per row, bit 6 = leftmost column.
"""
import sys
from pathlib import Path

from PIL import Image, ImageDraw, ImageFont

W, H, SIZE, THRESHOLD = 7, 13, 11, 100
FONT = "/usr/share/fonts/truetype/dejavu/DejaVuSansMono.ttf"


def glyph_rows(font, ch):
    img = Image.new("L", (W, H), 0)
    ImageDraw.Draw(img).text((0, -1), ch, fill=255, font=font)
    rows = []
    for y in range(H):
        bits = 0
        for x in range(W):
            if img.getpixel((x, y)) >= THRESHOLD:
                bits |= 1 << (W - 1 - x)
        rows.append(bits)
    return rows


def main():
    out = Path(sys.argv[1] if len(sys.argv) > 1 else "src/core/font_glyphs.inc")
    font = ImageFont.truetype(FONT, SIZE)
    lines = ["// Generated by tools/gen_font_glyphs.py; do not edit.",
             f"constexpr int kGlyphW = {W};",
             f"constexpr int kGlyphH = {H};",
             f"constexpr unsigned char kGlyphs[95][{H}] = {{"]
    for code in range(32, 127):
        rows = ", ".join(f"0x{r:02x}" for r in glyph_rows(font, chr(code)))
        lines.append(f"    {{{rows}}},  // {chr(code)!r}")
    lines.append("};")
    out.write_text("\n".join(lines) + "\n")


if __name__ == "__main__":
    main()
