"""Image sniffing and the content-addressed image store."""
import logging
import mimetypes
from io import BytesIO
from pathlib import Path

from django.core.files.base import ContentFile
from django.core.files.storage import FileSystemStorage
from PIL import Image as PILImage, UnidentifiedImageError

from .exceptions import ImageLoadError, StorageError
from .hashing import sha256_hex


logger = logging.getLogger('forge_app')


def sniff_media_type(data):
    """
    Return the MIME type of an encoded raster image.

    Raises:
        ImageLoadError: empty payload or not an image Pillow can decode
    """
    if not data:
        raise ImageLoadError("Empty image payload")
    try:
        with PILImage.open(BytesIO(data)) as image:
            image.verify()
            image_format = image.format
    except (UnidentifiedImageError, OSError, SyntaxError, ValueError) as e:
        raise ImageLoadError(f"Undecodable image payload: {e}")
    media_type = PILImage.MIME.get(image_format)
    if not media_type:
        raise ImageLoadError(f"Unsupported image format {image_format}")
    return media_type


def read_image(path):
    """Raw bytes plus media type of an image file"""
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise ImageLoadError(f"Cannot read image {path}: {e}")
    return data, sniff_media_type(data)


def extension_for(media_type):
    if media_type == 'image/jpeg':
        return '.jpg'
    return mimetypes.guess_extension(media_type) or '.bin'


class ImageStore:
    """Images saved under their SHA-256, so duplicate writes are harmless"""

    def __init__(self, location):
        self.location = Path(location)
        self.storage = FileSystemStorage(location=str(self.location), allow_overwrite=True)

    def name_for(self, data, media_type):
        return f"{sha256_hex(data)}{extension_for(media_type)}"

    def put(self, data, media_type):
        """Store bytes and return the file name relative to the store"""
        name = self.name_for(data, media_type)
        try:
            if not self.storage.exists(name):
                self.storage.save(name, ContentFile(data))
        except OSError as e:
            raise StorageError(f"Could not store image {name}: {e}")
        return name

    def path(self, name):
        return self.location / name

    def get(self, name):
        try:
            return self.path(name).read_bytes()
        except OSError as e:
            raise ImageLoadError(f"Stored image {name} unreadable: {e}")
