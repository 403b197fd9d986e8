# Static match visualization: the query above its top panoramas, matched windows outlined

from typing import List, Tuple, Sequence, Dict
import numpy as np
from PIL import Image, ImageDraw
from .windowing import WindowLayout, window_columns
from .retrieval import WindowMatch
from .dataset import save_image

LABEL_PX = 14
BOX_COLOR = (255, 0, 0)
TEXT_COLOR = (255, 255, 255)

def window_boxes(layout:WindowLayout, index:int, height:int) -> List[Tuple[int, int, int, int]]:
    """Rectangles `(x0, y0, x1, y1)` covering a window, end exclusive.

    A window that wraps around the seam yields two rectangles, one at each border.
    """
    window_columns(layout, index) # bounds check
    start, wraps = layout.offsets[index]
    width, length = layout.pano_width_px, layout.window_len_px
    if not wraps:
        return [(start, 0, start + length, height)]
    return [(start, 0, width, height), (0, 0, start + length - width, height)]

def annotate_matches( query:np.ndarray
                    , matches:Sequence[Tuple[str, WindowMatch]]
                    , panos:Dict[str, np.ndarray]
                    , layout:WindowLayout
                    , title:str=''
                    , top:int=3) -> np.ndarray:
    """Compose the query and its first `top` panoramas with the matched windows outlined"""
    entries = list(matches)[:top]
    width = max([query.shape[1]] + [panos[db_id].shape[1] for db_id, _ in entries])
    height = LABEL_PX + query.shape[0] + sum(LABEL_PX + panos[db_id].shape[0] for db_id, _ in entries)
    canvas = Image.new('RGB', (width, height))
    draw = ImageDraw.Draw(canvas)
    draw.text((2, 1), title or "query", fill=TEXT_COLOR)
    canvas.paste(Image.fromarray(np.ascontiguousarray(query, dtype=np.uint8)).convert('RGB'), (0, LABEL_PX))
    y = LABEL_PX + query.shape[0]
    for rank, (db_id, match) in enumerate(entries, start=1):
        draw.text((2, y + 1), f"#{rank} {db_id} window {match.window_index} d={match.distance:.4f}",
                  fill=TEXT_COLOR)
        y += LABEL_PX
        pano = panos[db_id]
        canvas.paste(Image.fromarray(np.ascontiguousarray(pano, dtype=np.uint8)).convert('RGB'), (0, y))
        for x0, y0, x1, y1 in window_boxes(layout, match.window_index, pano.shape[0]):
            draw.rectangle((x0, y + y0, x1 - 1, y + y1 - 1), outline=BOX_COLOR, width=2)
        y += pano.shape[0]
    return np.array(canvas, dtype=np.uint8)

def save_matches(path:str, *args, **kwargs) -> np.ndarray:
    """`annotate_matches` written to a PNG file"""
    image = annotate_matches(*args, **kwargs)
    save_image(path, image)
    return image
