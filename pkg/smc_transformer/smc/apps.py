from django.apps import AppConfig


class SmcConfig(AppConfig):
    name = 'smc'
