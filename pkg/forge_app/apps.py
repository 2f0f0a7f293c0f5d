from django.apps import AppConfig


class ForgeAppConfig(AppConfig):
    default_auto_field = "django.db.models.BigAutoField"
    name = "forge_app"
    verbose_name = "Edit data forge"
