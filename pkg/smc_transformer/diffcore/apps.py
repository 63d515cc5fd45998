from django.apps import AppConfig


class DiffcoreConfig(AppConfig):
    name = 'diffcore'
