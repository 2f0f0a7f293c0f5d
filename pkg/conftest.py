import os

import django

os.environ.setdefault("DJANGO_SETTINGS_MODULE", "editforge.settings")
django.setup()
